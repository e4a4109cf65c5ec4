"""Round-level diagnostics: gradient signal-to-noise ratio and aggregation consistency."""

from collections.abc import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import stats

from ..errors import InvalidArgumentError, ShapeMismatchError
from ..params import DEFAULT_EPSILON, check_finite, norm2

GSNR_CAP: float = 1e12


def gsnr(
    grads: NDArray[np.float64],
    eps: float = DEFAULT_EPSILON,
    cap: float = GSNR_CAP,
) -> float:
    """
    Mean over coordinates of m^2 / (v - m^2 + eps), where m and v are the
    first and second moments of the gradients in the window (rows = steps).
    Each coordinate is capped at `cap` so zero-variance windows stay finite.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 2:
        raise ShapeMismatchError(f"gradient window must be 2-D, got shape {grads.shape}")
    if len(grads) < 2:
        raise ShapeMismatchError("gsnr needs a window of at least 2 gradients")
    check_finite(grads, "gradient window")
    mean = grads.mean(axis=0)
    second = np.mean(grads * grads, axis=0)
    variance = np.maximum(second - mean * mean, 0.0)
    ratio = np.minimum(mean * mean / (variance + eps), cap)
    return float(np.mean(ratio))


def aggregation_consistency(
    client_params: Sequence[ArrayLike], sizes: Sequence[int]
) -> float:
    """sum_k |D_k| / sum_j |D_j| * ||w_k||"""
    if not client_params:
        raise ShapeMismatchError("aggregation_consistency needs at least one client")
    if len(client_params) != len(sizes):
        raise ShapeMismatchError(
            f"{len(client_params)} parameter vectors but {len(sizes)} sizes"
        )
    weights = np.asarray(sizes, dtype=np.float64)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise InvalidArgumentError("sizes must be nonnegative with a positive total")
    norms = np.array([norm2(p) for p in client_params])
    return float(np.dot(weights, norms) / weights.sum())


def student_t_interval(
    values: Sequence[float], confidence: float = 0.95
) -> tuple[float, float | None]:
    """Mean and two-sided Student-t half-width; the half-width is None for a single value."""
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) == 0:
        raise ShapeMismatchError("student_t_interval needs at least one value")
    mean = float(arr.mean())
    if len(arr) < 2:
        return mean, None
    quantile = stats.t.ppf(0.5 + confidence / 2, df=len(arr) - 1)
    return mean, float(quantile * arr.std(ddof=1) / np.sqrt(len(arr)))
