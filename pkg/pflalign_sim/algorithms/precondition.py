"""Element-wise preconditioning recurrences and the alignment gate of pFLAlign."""

import numpy as np

from .. import params
from ..errors import InvalidArgumentError
from ..params import ParamVector, check_same_length, freeze


def precondition_step(
    m: ParamVector,
    v: ParamVector,
    P: ParamVector,
    g: ParamVector,
    beta: float,
    eps: float,
    clip: bool = True,
) -> tuple[ParamVector, ParamVector, ParamVector, ParamVector]:
    """
    One step of the moment/preconditioner recurrences:

        m' = beta m + (1 - beta) g
        v' = beta v + (1 - beta) g^2
        alpha = 1 - (1 - beta) g^2 / (v' + eps)
        P' = clip(alpha, 0, 1) P + (1 - beta) m'^2 / (v' + eps)

    alpha is returned as computed. With `clip`, P' is clipped to [0, 1].
    """
    check_same_length(m, v, P, g)
    if not 0 < beta < 1:
        raise InvalidArgumentError(f"beta must lie in (0, 1), got {beta}")
    g2 = g * g
    m_new = beta * m + (1.0 - beta) * g
    v_new = beta * v + (1.0 - beta) * g2
    alpha = 1.0 - (1.0 - beta) * g2 / (v_new + eps)
    P_new = np.clip(alpha, 0.0, 1.0) * P + (1.0 - beta) * m_new * m_new / (v_new + eps)
    if clip:
        P_new = np.clip(P_new, 0.0, 1.0)
    return (
        freeze(m_new, "m"),
        freeze(v_new, "v"),
        freeze(alpha, "alpha"),
        freeze(P_new, "P"),
    )


def alignment_gamma(
    m: ParamVector, v: ParamVector, delta: ParamVector, eps: float
) -> ParamVector:
    """
    gamma = 0.5 - 0.5 erf(|m| / sqrt(2 (v - m^2) + eps)) sign(-m delta)

    i.e. the probability that the descent direction -g disagrees with sign(delta)
    when g ~ N(m, v - m^2). The variance estimate is clamped at 0.
    """
    check_same_length(m, v, delta)
    if eps <= 0:
        raise InvalidArgumentError("eps must be positive")
    variance = np.maximum(v - m * m, 0.0)
    z = np.abs(m) / np.sqrt(2.0 * variance + eps)
    return freeze(0.5 - 0.5 * params.erf(z) * params.sign(-m * delta), "gamma")
