"""
Closed-form reference quantities used to cross-check the runtime update rules.

Covers the variance-adaptation factor, the variance-reduced estimator, the
PAC-Bayes optimal preconditioner rule with its coordinate objective, diagonal
Gaussian KL terms, and the alignment probability of the offset gate together
with a Monte-Carlo estimator for it.
"""

from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special

from ..algorithms.precondition import precondition_step
from ..errors import InvalidArgumentError, ShapeMismatchError
from ..params import (
    DEFAULT_EPSILON,
    ParamVector,
    as_param_vector,
    check_same_length,
    freeze,
    zeros,
)


def svag_factor(
    Eg: ArrayLike, Eg2: ArrayLike, eps: float = DEFAULT_EPSILON
) -> ParamVector:
    """q = E[g]^2 / (E[g^2] + eps), the minimizer of E||q * g - E[g]||^2."""
    Eg, Eg2 = np.asarray(Eg, dtype=np.float64), np.asarray(Eg2, dtype=np.float64)
    check_same_length(Eg, Eg2)
    if np.any(Eg2 < Eg * Eg * (1 - 1e-12)):
        raise InvalidArgumentError("invalid moments: E[g^2] < E[g]^2")
    return freeze(Eg * Eg / (Eg2 + eps), "svag factor")


def svag_deviation(q: ArrayLike, Eg: ArrayLike, Eg2: ArrayLike) -> float:
    """sum_i q^2 E[g^2] - 2 q E[g]^2 + E[g]^2"""
    q, Eg, Eg2 = (np.asarray(x, dtype=np.float64) for x in (q, Eg, Eg2))
    check_same_length(q, Eg, Eg2)
    Eg_sq = Eg * Eg
    return float(np.sum(q * q * Eg2 - 2.0 * q * Eg_sq + Eg_sq))


def svrg_estimator(
    g_at_w: ArrayLike, g_at_ref: ArrayLike, full_grad_ref: ArrayLike
) -> ParamVector:
    """g(w; xi) - g(w_ref; xi) + grad F(w_ref)"""
    g_at_w, g_at_ref, full_grad_ref = (
        np.asarray(x, dtype=np.float64) for x in (g_at_w, g_at_ref, full_grad_ref)
    )
    check_same_length(g_at_w, g_at_ref, full_grad_ref)
    return freeze(g_at_w - g_at_ref + full_grad_ref, "svrg estimate")


@dataclass(kw_only=True, frozen=True)
class PacBayesPreconditionerState:
    """Gaussian posterior N(p, s2) over each coordinate of the preconditioner."""

    p: ParamVector
    s2: ParamVector
    beta_pb: float = 1.0
    n: int = 1
    L: float = 1.0

    def __post_init__(self):
        check_same_length(self.p, self.s2)
        if np.any(np.asarray(self.s2) <= 0):
            raise InvalidArgumentError("posterior variance s2 must be positive")
        if self.beta_pb <= 0 or self.n < 1 or self.L <= 0:
            raise InvalidArgumentError("beta_pb, n and L must be positive")

    @classmethod
    def initial(
        cls, num_params: int, s2: float = 1.0, **kwargs
    ) -> "PacBayesPreconditionerState":
        return cls(p=zeros(num_params), s2=freeze(np.full(num_params, s2)), **kwargs)

    @property
    def beta_n(self) -> float:
        return self.beta_pb * self.n


@dataclass(kw_only=True, frozen=True)
class GaussianDiag:
    mean: ParamVector
    var: ParamVector

    def __post_init__(self):
        check_same_length(self.mean, self.var)
        if np.any(np.asarray(self.var) <= 0):
            raise InvalidArgumentError("GaussianDiag variances must be positive")


def _check_curvature(G2: NDArray) -> None:
    if np.any(G2 <= 0):
        raise InvalidArgumentError("G2 must be positive")


def pacbayes_precond_update(
    st: PacBayesPreconditionerState, mu: ArrayLike, G2: ArrayLike
) -> tuple[PacBayesPreconditionerState, ParamVector, ParamVector]:
    """
    One online step of the optimal rule:

        p_tilde = mu^2 / (L G2)
        alpha   = L G2 / (L G2 + 1 / (beta n s2))
        p'      = alpha p_tilde + (1 - alpha) p
        1/s2'   = 1/s2 + beta n L G2
    """
    mu, G2 = np.asarray(mu, dtype=np.float64), np.asarray(G2, dtype=np.float64)
    check_same_length(st.p, mu, G2)
    _check_curvature(G2)
    curvature = st.L * G2
    p_tilde = mu * mu / curvature
    alpha = curvature / (curvature + 1.0 / (st.beta_n * st.s2))
    p_new = alpha * p_tilde + (1.0 - alpha) * st.p
    s2_new = 1.0 / (1.0 / st.s2 + st.beta_n * curvature)
    return (
        replace(st, p=freeze(p_new, "p"), s2=freeze(s2_new, "s2")),
        freeze(alpha, "alpha"),
        freeze(p_tilde, "p_tilde"),
    )


def pacbayes_mean_fraction(
    st: PacBayesPreconditionerState, mu: ArrayLike, G2: ArrayLike
) -> ParamVector:
    """Precision-weighted form of the mean update: (mu^2 + p / (beta n s2)) / (L G2 + 1 / (beta n s2))."""
    mu, G2 = np.asarray(mu, dtype=np.float64), np.asarray(G2, dtype=np.float64)
    check_same_length(st.p, mu, G2)
    _check_curvature(G2)
    prior_precision = 1.0 / (st.beta_n * st.s2)
    return freeze(
        (mu * mu + st.p * prior_precision) / (st.L * G2 + prior_precision), "p"
    )


def pacbayes_alpha_cumulative(
    G2_history: NDArray[np.float64],
    s2_0: ArrayLike,
    beta_pb: float = 1.0,
    n: int = 1,
    L: float = 1.0,
) -> ParamVector:
    """
    Mixing weight of the last step written through the accumulated curvature:

        alpha_t = beta n L G2_t / (1/s2_0 + beta n L sum_{tau <= t} G2_tau)
    """
    G2_history = np.atleast_2d(np.asarray(G2_history, dtype=np.float64))
    _check_curvature(G2_history)
    s2_0 = np.asarray(s2_0, dtype=np.float64)
    scale = beta_pb * n * L
    return freeze(
        scale * G2_history[-1] / (1.0 / s2_0 + scale * G2_history.sum(axis=0)),
        "alpha",
    )


def _kl_terms(
    mean_q: NDArray, var_q: NDArray, mean_p: NDArray, var_p: NDArray
) -> NDArray:
    diff = mean_q - mean_p
    return 0.5 * (diff * diff / var_p + var_q / var_p + np.log(var_p / var_q) - 1.0)


def pacbayes_objective(
    p: ArrayLike,
    s2: ArrayLike,
    mu2: float,
    G2: float,
    L: float,
    beta_pb: float,
    n: int,
    p_prev: float,
    s2_prev: float,
) -> NDArray[np.float64] | float:
    """
    J = -p mu^2 + (L/2) G2 (p^2 + s2) + KL(N(p, s2) || N(p_prev, s2_prev)) / (beta n)

    `p` and `s2` may be arrays (broadcast together) for grid evaluation.
    """
    p, s2 = np.asarray(p, dtype=np.float64), np.asarray(s2, dtype=np.float64)
    if np.any(s2 <= 0) or s2_prev <= 0:
        raise InvalidArgumentError("variances must be positive")
    kl = _kl_terms(p, s2, np.float64(p_prev), np.float64(s2_prev))
    value = -p * mu2 + 0.5 * L * G2 * (p * p + s2) + kl / (beta_pb * n)
    return float(value) if value.ndim == 0 else value


def kl_gaussian_diag(q: GaussianDiag, p: GaussianDiag) -> float:
    """KL(q || p) for diagonal Gaussians."""
    check_same_length(q.mean, p.mean)
    return float(np.sum(_kl_terms(q.mean, q.var, p.mean, p.var)))


def kl_grad_wrt_delta(
    delta: ArrayLike, m_k: ArrayLike, rho2: ArrayLike, eta: float
) -> ParamVector:
    """
    Gradient of the offset KL against the prior N(w - eta m_k, eta^2 diag(rho2)):

        (delta + eta m_k) / (eta^2 rho2)
    """
    delta, m_k, rho2 = (np.asarray(x, dtype=np.float64) for x in (delta, m_k, rho2))
    check_same_length(delta, m_k, rho2)
    if np.any(rho2 <= 0):
        raise InvalidArgumentError("rho2 must be positive")
    if eta <= 0:
        raise InvalidArgumentError("eta must be positive")
    return freeze((delta + eta * m_k) / (eta * eta * rho2), "kl gradient")


def offset_kl(delta: ArrayLike, m_k: ArrayLike, rho2: ArrayLike, eta: float) -> float:
    """The KL whose gradient `kl_grad_wrt_delta` returns; posterior and prior share the covariance."""
    var = eta * eta * np.asarray(rho2, dtype=np.float64)
    return kl_gaussian_diag(
        GaussianDiag(mean=as_param_vector(delta), var=var),
        GaussianDiag(mean=as_param_vector(-eta * np.asarray(m_k, dtype=np.float64)), var=var),
    )


def alignment_gamma_signed(
    m: ArrayLike, v: ArrayLike, delta: ArrayLike, eps: float = DEFAULT_EPSILON
) -> ParamVector:
    """gamma = 0.5 + 0.5 erf(m / sqrt(2 (v - m^2) + eps)) sign(delta)"""
    m, v, delta = (np.asarray(x, dtype=np.float64) for x in (m, v, delta))
    check_same_length(m, v, delta)
    variance = np.maximum(v - m * m, 0.0)
    return freeze(
        0.5 + 0.5 * special.erf(m / np.sqrt(2.0 * variance + eps)) * np.sign(delta),
        "gamma",
    )


def alignment_probability(
    m: ArrayLike, var: ArrayLike, delta_sign: ArrayLike, eps: float = DEFAULT_EPSILON
) -> NDArray[np.float64]:
    """
    P[sign(-g) = sign(delta)] for g ~ N(m, var), with the same eps smoothing as
    the gate. Coordinates with delta_sign = 0 get 0.5.
    """
    m, var, s = (np.asarray(x, dtype=np.float64) for x in (m, var, delta_sign))
    if np.any(var < 0):
        raise InvalidArgumentError("var must be nonnegative")
    z = -np.sign(s) * m / np.sqrt(var + 0.5 * eps)
    return np.where(s == 0, 0.5, special.ndtr(z))


def mc_alignment_probability(
    m: float,
    var: float,
    delta_sign: int,
    samples: int,
    seed: int | np.random.SeedSequence,
    stratified: bool = False,
) -> float:
    """
    Fraction of draws g ~ N(m, var) whose descent direction -g has sign
    `delta_sign`. With `stratified`, uniforms are drawn one per stratum of
    [0, 1) and mapped through the inverse normal CDF.
    """
    if var <= 0:
        raise InvalidArgumentError("var must be positive")
    if samples < 1:
        raise InvalidArgumentError("samples must be at least 1")
    if delta_sign not in (-1, 0, 1):
        raise InvalidArgumentError(f"delta_sign must be -1, 0 or +1, got {delta_sign}")
    if delta_sign == 0:
        return 0.5
    rng = np.random.default_rng(seed)
    if stratified:
        u = (np.arange(samples) + rng.random(samples)) / samples
        z = special.ndtri(u)
    else:
        z = rng.standard_normal(samples)
    g = m + np.sqrt(var) * z
    return float(np.mean(np.sign(-g) == delta_sign))


def preconditioner_divergence(
    grads: NDArray[np.float64],
    beta: float = 0.9,
    eps: float = DEFAULT_EPSILON,
    s2_0: float = 1.0,
    **pacbayes,
) -> NDArray[np.float64]:
    """
    Mean |P_t - p_t| per step when the runtime recurrence and the PAC-Bayes rule
    consume the same gradient stream. The rule is fed the running moments
    (mu = m_t, G2 = v_t + eps) of the recurrence.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 2:
        raise ShapeMismatchError(f"gradient stream must be 2-D, got shape {grads.shape}")
    d = grads.shape[1]
    m, v, P = zeros(d), zeros(d), zeros(d)
    st = PacBayesPreconditionerState.initial(d, s2_0, **pacbayes)
    gaps = []
    for g in grads:
        m, v, _, P = precondition_step(m, v, P, g, beta, eps)
        st, _, _ = pacbayes_precond_update(st, m, v + eps)
        gaps.append(float(np.mean(np.abs(P - st.p))))
    return np.asarray(gaps)
