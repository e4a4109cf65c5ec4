"""
Dense flat parameter vectors and the element-wise algebra every algorithm is written in.

A ParamVector is a 1-D float64 numpy array. Vectors returned by this module are
read-only so they can be shared between client workers without copying.
"""

from collections.abc import Sequence
from pflalign_sim._compat import StrEnum

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special

from .errors import InvalidArgumentError, NonFiniteError, ShapeMismatchError

ParamVector = NDArray[np.float64]

DEFAULT_EPSILON: float = 1e-12


class Op(StrEnum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    SCALE = "scale"
    SQUARE = "square"
    ABS = "abs"
    SIGN = "sign"
    ERF = "erf"


UNARY_OPS = frozenset({Op.SQUARE, Op.ABS, Op.SIGN, Op.ERF})


def check_finite(values: NDArray, what: str = "result") -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite entries in {what}")


def freeze(values: ArrayLike, what: str = "result") -> ParamVector:
    """Validate a freshly computed vector and mark it read-only."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise ShapeMismatchError(f"{what} must be 1-D, got shape {vec.shape}")
    check_finite(vec, what)
    vec.flags.writeable = False
    return vec


def as_param_vector(values: ArrayLike) -> ParamVector:
    """Copy `values` into a new read-only ParamVector."""
    return freeze(np.array(values, dtype=np.float64, copy=True), "input")


def zeros(length: int) -> ParamVector:
    return freeze(np.zeros(length, dtype=np.float64))


def check_same_length(*vectors: NDArray) -> int:
    lengths = {len(v) for v in vectors}
    if len(lengths) != 1:
        raise ShapeMismatchError(f"length mismatch: {sorted(lengths)}")
    return lengths.pop()


def erf(x: ArrayLike) -> NDArray[np.float64]:
    """Gauss error function, element-wise."""
    return special.erf(np.asarray(x, dtype=np.float64))


def sign(x: ArrayLike) -> NDArray[np.float64]:
    """Element-wise sign with sign(0) = 0."""
    return np.sign(np.asarray(x, dtype=np.float64))


def elementwise(
    op: Op | str,
    a: ArrayLike,
    b: ArrayLike | float | None = None,
    *,
    eps: float | None = None,
) -> ParamVector:
    """Apply `op` coordinate-wise. `b` may be a vector of the same length or a scalar."""
    op = Op(op)
    a = np.asarray(a, dtype=np.float64)
    check_finite(a, "operand")
    if op in UNARY_OPS:
        if op == Op.SQUARE:
            return freeze(np.square(a))
        if op == Op.ABS:
            return freeze(np.abs(a))
        if op == Op.SIGN:
            return freeze(sign(a))
        return freeze(erf(a))

    if b is None:
        raise ShapeMismatchError(f"operation {op} needs a second operand")
    b = np.asarray(b, dtype=np.float64)
    if b.ndim:
        check_same_length(a, b)
    check_finite(b, "operand")

    match op:
        case Op.ADD:
            return freeze(a + b)
        case Op.SUB:
            return freeze(a - b)
        case Op.MUL | Op.SCALE:
            return freeze(a * b)
        case Op.DIV:
            if eps is None or eps <= 0:
                raise InvalidArgumentError("div needs an epsilon > 0")
            return freeze(a / (b + eps))
        case _:
            raise RuntimeError("unreachable")


def weighted_average(
    vectors: Sequence[ArrayLike], weights: Sequence[float]
) -> ParamVector:
    """Return sum_i (w_i / sum_j w_j) * v_i, accumulated in list order."""
    if not vectors:
        raise ShapeMismatchError("weighted_average needs at least one vector")
    if len(vectors) != len(weights):
        raise ShapeMismatchError(
            f"{len(vectors)} vectors but {len(weights)} weights"
        )
    stack = [np.asarray(v, dtype=np.float64) for v in vectors]
    check_same_length(*stack)
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise InvalidArgumentError("weights must be nonnegative")
    total = float(w.sum())
    if total <= 0:
        raise InvalidArgumentError("total weight must be positive")

    first = stack[0]
    if all(np.array_equal(first, v) for v in stack[1:]):
        return freeze(first.copy())

    out = np.zeros_like(first)
    for wi, v in zip(w / total, stack, strict=True):
        out += wi * v
    return freeze(out)


def norm2(a: ArrayLike) -> float:
    a = np.asarray(a, dtype=np.float64)
    check_finite(a, "input")
    return float(np.linalg.norm(a))
