"""
Numerical self-checks of the closed forms and the reduction properties of the local rules.

Every check is a zero-argument function returning its largest observed error;
the suite compares it with the check's tolerance. Exceptions raised inside a
check become failed results instead of aborting the suite.
"""

import asyncio
import itertools
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace

import numpy as np

from ..algorithms import (
    Algorithm,
    ClientState,
    FedAvg,
    FedProx,
    FedSAM,
    LocalConfig,
    default_collection,
    pflalign_local_round,
)
from ..algorithms.precondition import alignment_gamma, precondition_step
from ..algorithms.run import run_workers
from ..data import ClientDataset, DataConfig, Task, build_datasets, minibatch_indices
from ..errors import InvalidArgumentError
from ..models import (
    LossKind,
    Minibatch,
    ModelKind,
    ModelSpec,
    init_params,
    loss_and_grad,
)
from ..params import DEFAULT_EPSILON, zeros
from . import oracles
from .metrics import aggregation_consistency

logger = logging.getLogger(__name__)

VERIFY_SEED = 20240917
MC_SAMPLES = 1_000_000
GRID_STEP = 1e-4


@dataclass(kw_only=True, frozen=True)
class CheckResult:
    """Outcome of one numerical check."""

    check_name: str
    max_error: float | None
    tolerance: float | None
    passed: bool
    error: str | None = None
    diagnostic: bool = False

    def __bool__(self):
        return self.passed

    def replace(self, **kwargs) -> "CheckResult":
        return replace(self, **kwargs)

    def to_json(self) -> dict:
        record = {
            "check_name": self.check_name,
            "max_error": self.max_error,
            "tolerance": self.tolerance,
            "pass": self.passed,
        }
        if self.diagnostic:
            record["diagnostic"] = True
        if self.error:
            record["error"] = self.error
        return record


@dataclass(frozen=True)
class Check:
    """
    A named numerical check.

    A diagnostic check has no tolerance: its value is reported and it only
    fails when it raises or returns a non-finite value.
    """

    name: str
    tolerance: float | None
    fn: Callable[[], float]
    diagnostic: bool = False

    def __post_init__(self):
        if self.diagnostic != (self.tolerance is None):
            raise InvalidArgumentError(f"check {self.name}: a tolerance is required unless diagnostic")

    def __call__(self) -> CheckResult:
        try:
            max_error = float(self.fn())
        except Exception as e:
            logger.warning("check %s raised %s: %s", self.name, type(e).__name__, e)
            return CheckResult(
                check_name=self.name,
                max_error=None,
                tolerance=self.tolerance,
                passed=False,
                error=f"{type(e).__name__}: {e}",
                diagnostic=self.diagnostic,
            )
        passed = bool(np.isfinite(max_error))
        if self.tolerance is not None:
            passed = passed and max_error <= self.tolerance
        return CheckResult(
            check_name=self.name,
            max_error=max_error,
            tolerance=self.tolerance,
            passed=passed,
            diagnostic=self.diagnostic,
        )


CHECKS: list[Check] = []


def check(name: str, tolerance: float | None = None, *, diagnostic: bool = False):
    def register(fn: Callable[[], float]) -> Callable[[], float]:
        CHECKS.append(Check(name, tolerance, fn, diagnostic))
        return fn

    return register


def _rng(name: str) -> np.random.Generator:
    return np.random.default_rng([VERIFY_SEED, *name.encode()])


def _mismatch(a, b) -> float:
    return 0.0 if np.array_equal(a, b) else 1.0


# -- alignment gate --------------------------------------------------------

GAMMA_GRID_M = (-2.0, -0.5, 0.0, 0.5, 2.0)
GAMMA_GRID_VAR = (0.04, 0.25, 1.0, 4.0)
GAMMA_GRID_SIGN = (-1, 1)


@check("gamma_vs_monte_carlo", 1.0)
def check_gamma_monte_carlo() -> float:
    """Largest |gamma - (1 - rho_mc)| in units of 3 binomial standard errors."""
    cells = list(itertools.product(GAMMA_GRID_M, GAMMA_GRID_VAR, GAMMA_GRID_SIGN))
    m = np.array([c[0] for c in cells])
    var = np.array([c[1] for c in cells])
    sign = np.array([c[2] for c in cells], dtype=np.float64)
    gamma = alignment_gamma(m, var + m * m, sign, DEFAULT_EPSILON)

    root = np.random.SeedSequence(VERIFY_SEED)
    worst = 0.0
    for i, (mi, vi, si) in enumerate(cells):
        rho = oracles.mc_alignment_probability(
            mi, vi, si, MC_SAMPLES, root.spawn(1)[0], stratified=True
        )
        p = 1.0 - gamma[i]
        bound = 3.0 * max(np.sqrt(p * (1.0 - p) / MC_SAMPLES), 1.0 / MC_SAMPLES)
        worst = max(worst, abs(gamma[i] - (1.0 - rho)) / bound)
        logger.debug("gamma cell m=%g var=%g sign=%d rho=%.6f", mi, vi, si, rho)
    return worst


@check("gamma_form_equivalence", 1e-12)
def check_gamma_forms() -> float:
    rng = _rng("gamma_form_equivalence")
    n = 10_000
    m = rng.normal(scale=2.0, size=n)
    v = m * m + rng.uniform(0.0, 4.0, size=n)
    delta = rng.normal(size=n)
    delta[::17] = 0.0
    a = alignment_gamma(m, v, delta, DEFAULT_EPSILON)
    b = oracles.alignment_gamma_signed(m, v, delta, DEFAULT_EPSILON)
    return float(np.max(np.abs(a - b)))


@check("gamma_range", 0.0)
def check_gamma_range() -> float:
    rng = _rng("gamma_range")
    n = 10_000
    m = rng.normal(scale=3.0, size=n)
    v = rng.uniform(0.0, 10.0, size=n)
    delta = rng.normal(size=n)
    gamma = alignment_gamma(m, v, delta, DEFAULT_EPSILON)
    return float(max(0.0, -gamma.min(), gamma.max() - 1.0))


# -- PAC-Bayes preconditioner ------------------------------------------------


def _random_pacbayes(rng: np.random.Generator) -> tuple[dict, float, float]:
    G2 = rng.uniform(0.2, 2.0)
    params = {
        "mu2": rng.uniform(0.0, 1.0) * G2,
        "G2": G2,
        "L": rng.uniform(0.5, 2.0),
        "beta_pb": rng.uniform(0.5, 2.0),
        "n": int(rng.integers(1, 6)),
        "p_prev": rng.uniform(0.0, 1.0),
        "s2_prev": rng.uniform(0.1, 2.0),
    }
    st = oracles.PacBayesPreconditionerState(
        p=np.array([params["p_prev"]]),
        s2=np.array([params["s2_prev"]]),
        beta_pb=params["beta_pb"],
        n=params["n"],
        L=params["L"],
    )
    new, _, _ = oracles.pacbayes_precond_update(
        st, np.array([np.sqrt(params["mu2"])]), np.array([G2])
    )
    return params, float(new.p[0]), float(new.s2[0])


@check("pacbayes_grid_argmin", 2.0)
def check_pacbayes_argmin() -> float:
    """Distance, in grid steps, between the closed-form update and the grid argmin."""
    rng = _rng("pacbayes_grid_argmin")
    p_grid = -0.5 + GRID_STEP * np.arange(int(3.0 / GRID_STEP) + 1)
    worst = 0.0
    for _ in range(100):
        params, p_new, s2_new = _random_pacbayes(rng)
        s2_grid = GRID_STEP * np.arange(1, int((params["s2_prev"] + 0.01) / GRID_STEP) + 1)
        # the objective separates in p and s2
        j_p = oracles.pacbayes_objective(p_grid, params["s2_prev"], **params)
        j_s2 = oracles.pacbayes_objective(p_new, s2_grid, **params)
        p_best = p_grid[int(np.argmin(j_p))]
        s2_best = s2_grid[int(np.argmin(j_s2))]
        worst = max(worst, abs(p_best - p_new) / GRID_STEP, abs(s2_best - s2_new) / GRID_STEP)
    return worst


@check("pacbayes_mean_forms", 1e-10)
def check_pacbayes_mean_forms() -> float:
    rng = _rng("pacbayes_mean_forms")
    d = 1000
    st = oracles.PacBayesPreconditionerState(
        p=rng.uniform(0.0, 1.0, size=d),
        s2=rng.uniform(0.01, 5.0, size=d),
        beta_pb=1.7,
        n=3,
        L=0.8,
    )
    G2 = rng.uniform(0.01, 4.0, size=d)
    mu = np.sqrt(G2) * rng.uniform(-1.0, 1.0, size=d)
    convex, _, _ = oracles.pacbayes_precond_update(st, mu, G2)
    fraction = oracles.pacbayes_mean_fraction(st, mu, G2)
    return float(np.max(np.abs(convex.p - fraction)))


def _pacbayes_stream(name: str, steps: int = 50, d: int = 16):
    rng = _rng(name)
    st = oracles.PacBayesPreconditionerState.initial(d, 1.0, beta_pb=1.3, n=2, L=1.1)
    history = rng.uniform(0.1, 1.0, size=(steps, d))
    s2, alphas = [st.s2], []
    for G2 in history:
        mu = np.sqrt(G2) * rng.uniform(-1.0, 1.0, size=d)
        st, alpha, _ = oracles.pacbayes_precond_update(st, mu, G2)
        s2.append(st.s2)
        alphas.append(alpha)
    return history, np.stack(s2), np.stack(alphas)


@check("pacbayes_variance_decreasing", 0.0)
def check_pacbayes_variance() -> float:
    _, s2, _ = _pacbayes_stream("pacbayes_variance_decreasing")
    return 0.0 if np.all(np.diff(s2, axis=0) < 0) else 1.0


@check("pacbayes_alpha_cumulative_form", 1e-10)
def check_pacbayes_alpha_cumulative() -> float:
    history, _, alphas = _pacbayes_stream("pacbayes_alpha_cumulative_form")
    worst = 0.0
    for t in range(len(history)):
        cumulative = oracles.pacbayes_alpha_cumulative(
            history[: t + 1], 1.0, beta_pb=1.3, n=2, L=1.1
        )
        worst = max(worst, float(np.max(np.abs(cumulative - alphas[t]))))
    return worst


# -- KL terms --------------------------------------------------------------


@check("kl_grad_finite_difference", 1e-6)
def check_kl_grad() -> float:
    """Relative error |fd - analytic| / max(|analytic|, 1) of central differences."""
    rng = _rng("kl_grad_finite_difference")
    h = 1e-4
    worst = 0.0
    for _ in range(100):
        d = 3
        delta = rng.normal(size=d)
        m_k = rng.normal(size=d)
        rho2 = rng.uniform(0.5, 2.0, size=d)
        eta = rng.uniform(0.05, 0.5)
        analytic = oracles.kl_grad_wrt_delta(delta, m_k, rho2, eta)
        for i in range(d):
            step = np.zeros(d)
            step[i] = h
            fd = (
                oracles.offset_kl(delta + step, m_k, rho2, eta)
                - oracles.offset_kl(delta - step, m_k, rho2, eta)
            ) / (2 * h)
            worst = max(worst, abs(fd - analytic[i]) / max(abs(analytic[i]), 1.0))
    return worst


@check("kl_grad_stationary_point", 0.0)
def check_kl_stationary() -> float:
    rng = _rng("kl_grad_stationary_point")
    eta = 0.1
    m_k = rng.normal(size=32)
    grad = oracles.kl_grad_wrt_delta(-eta * m_k, m_k, rng.uniform(0.1, 2.0, size=32), eta)
    return float(np.max(np.abs(grad)))


@check("kl_monte_carlo", 3.0)
def check_kl_monte_carlo() -> float:
    """|KL_mc - KL| in standard errors of the Monte-Carlo mean."""
    rng = _rng("kl_monte_carlo")
    d = 3
    q = oracles.GaussianDiag(mean=rng.normal(size=d), var=rng.uniform(0.3, 2.0, size=d))
    p = oracles.GaussianDiag(mean=rng.normal(size=d), var=rng.uniform(0.3, 2.0, size=d))
    x = q.mean + np.sqrt(q.var) * rng.standard_normal((MC_SAMPLES, d))

    def log_density(g: oracles.GaussianDiag):
        return -0.5 * np.sum(
            (x - g.mean) ** 2 / g.var + np.log(2 * np.pi * g.var), axis=1
        )

    ratio = log_density(q) - log_density(p)
    standard_error = ratio.std(ddof=1) / np.sqrt(MC_SAMPLES)
    return abs(float(ratio.mean()) - oracles.kl_gaussian_diag(q, p)) / standard_error


# -- variance adaptation and variance reduction ------------------------------


@check("svag_minimizer", 1e-12)
def check_svag() -> float:
    """Largest decrease of the deviation when one coordinate of q moves by 1e-2."""
    rng = _rng("svag_minimizer")
    d = 64
    Eg = rng.normal(size=d)
    Eg2 = Eg * Eg + rng.uniform(0.0, 2.0, size=d)
    q = oracles.svag_factor(Eg, Eg2)
    base = oracles.svag_deviation(q, Eg, Eg2)
    worst = 0.0
    for i in range(d):
        for shift in (-1e-2, 1e-2):
            moved = q.copy()
            moved[i] += shift
            worst = max(worst, base - oracles.svag_deviation(moved, Eg, Eg2))
    return worst


@check("svrg_unbiased", 1e-10)
def check_svrg() -> float:
    """Average of the estimator over every sample equals the full gradient at w."""
    rng = _rng("svrg_unbiased")
    spec = ModelSpec(kind=ModelKind.LINEAR_REGRESSION, input_dim=4, output_dim=1)
    data = Minibatch(inputs=rng.normal(size=(10, 4)), targets=rng.normal(size=(10, 1)))
    w = rng.normal(size=spec.num_params)
    ref = rng.normal(size=spec.num_params)
    _, full_at_w = loss_and_grad(spec, w, data)
    _, full_at_ref = loss_and_grad(spec, ref, data)
    estimates = []
    for i in range(len(data)):
        sample = data.take(np.array([i]))
        _, g_w = loss_and_grad(spec, w, sample)
        _, g_ref = loss_and_grad(spec, ref, sample)
        estimates.append(oracles.svrg_estimator(g_w, g_ref, full_at_ref))
    return float(np.max(np.abs(np.mean(estimates, axis=0) - full_at_w)))


# -- models ------------------------------------------------------------------

GRADIENT_CHECK_MODELS = (
    ModelSpec(kind=ModelKind.LINEAR_REGRESSION, input_dim=3, output_dim=2),
    ModelSpec(kind=ModelKind.MULTINOMIAL_LOGISTIC, input_dim=3, output_dim=3),
    ModelSpec(kind=ModelKind.MLP, input_dim=3, output_dim=3, hidden_dim=4),
    ModelSpec(kind=ModelKind.MLP, input_dim=3, output_dim=2, hidden_dim=4, loss=LossKind.MSE),
)


def _random_batch(rng: np.random.Generator, spec: ModelSpec, size: int = 8) -> Minibatch:
    inputs = rng.normal(size=(size, spec.input_dim))
    if spec.is_classifier:
        targets = rng.integers(0, spec.output_dim, size=size)
    else:
        targets = rng.normal(size=(size, spec.output_dim))
    return Minibatch(inputs=inputs, targets=targets)


@check("model_gradients", 1e-5)
def check_model_gradients() -> float:
    rng = _rng("model_gradients")
    h = 1e-6
    worst = 0.0
    for spec in GRADIENT_CHECK_MODELS:
        for _ in range(10):
            params = rng.normal(size=spec.num_params)
            batch = _random_batch(rng, spec)
            _, analytic = loss_and_grad(spec, params, batch)
            fd = np.empty(spec.num_params)
            for i in range(spec.num_params):
                step = np.zeros(spec.num_params)
                step[i] = h
                up, _ = loss_and_grad(spec, params + step, batch)
                down, _ = loss_and_grad(spec, params - step, batch)
                fd[i] = (up - down) / (2 * h)
            scale = max(float(np.max(np.abs(analytic))), 1.0)
            worst = max(worst, float(np.max(np.abs(fd - analytic))) / scale)
    return worst


# -- local update rules --------------------------------------------------------


def _toy_client() -> tuple[ClientDataset, ModelSpec]:
    cfg = DataConfig(
        num_clients=1,
        train_per_client=40,
        test_per_client=10,
        input_dim=3,
        num_classes=3,
        task=Task.CLASSIFICATION,
        seed=VERIFY_SEED,
    )
    spec = ModelSpec(kind=ModelKind.MULTINOMIAL_LOGISTIC, input_dim=3, output_dim=3)
    return build_datasets(cfg)[0], spec


def _toy_global(spec: ModelSpec) -> np.ndarray:
    return init_params(spec, np.random.default_rng(VERIFY_SEED))


def _same_as_fedavg(variant, cfg: LocalConfig) -> float:
    data, spec = _toy_client()
    w = _toy_global(spec)
    state = ClientState.initial(0, spec.num_params)
    kwargs = dict(state=state, global_params=w, data=data, model=spec, batch_seed=11)
    base = FedAvg()(cfg=cfg, **kwargs)
    other = variant(cfg=cfg, **kwargs)
    return max(_mismatch(base.params, other.params), _mismatch(base.trace.grads, other.trace.grads))


@check("fedprox_zero_mu_is_fedavg", 0.0)
def check_fedprox_reduction() -> float:
    return _same_as_fedavg(FedProx(), LocalConfig(prox_mu=0.0))


@check("fedsam_zero_rho_is_fedavg", 0.0)
def check_fedsam_reduction() -> float:
    return _same_as_fedavg(FedSAM(), LocalConfig(sam_rho=0.0))


def _preconditioned_sgd(state, w, data, cfg, spec, seed):
    """The pFLAlign client loop with the correction term removed."""
    indices = minibatch_indices(seed, data.size, cfg.local_steps, cfg.batch_size)
    m, v, P = zeros(len(w)), state.v, state.P
    for t in range(cfg.local_steps):
        _, g = loss_and_grad(spec, w, data.train.take(indices[t]))
        m, v, _, P = precondition_step(m, v, P, g, cfg.beta, cfg.epsilon)
        w = w - cfg.lr * (P * g)
    return w


@check("round0_zero_correction", 0.0)
def check_round0() -> float:
    """With a zero offset the first iterate is the global model and no correction is applied."""
    data, spec = _toy_client()
    w = _toy_global(spec)
    cfg = LocalConfig()
    state = ClientState.initial(0, spec.num_params)
    result = pflalign_local_round(state, w, data, cfg, spec, 5)
    first_batch = data.train.take(result.batch_indices[0])
    loss0, g0 = loss_and_grad(spec, w, first_batch)
    return max(
        _mismatch(result.trace.grads[0], g0),
        0.0 if result.trace.losses[0] == loss0 else 1.0,
    )


@check("zero_offset_reduction", 0.0)
def check_zero_offset() -> float:
    data, spec = _toy_client()
    w = _toy_global(spec)
    cfg = LocalConfig(local_steps=8)
    rng = _rng("zero_offset_reduction")
    # carried-over moments, zero offset
    state = ClientState.initial(0, spec.num_params).replace(
        v=rng.uniform(0.0, 0.1, size=spec.num_params),
        P=rng.uniform(0.0, 1.0, size=spec.num_params),
    )
    result = pflalign_local_round(state, w, data, cfg, spec, 9)
    return _mismatch(result.params, _preconditioned_sgd(state, w, data, cfg, spec, 9))


@check("local_determinism", 0.0)
def check_determinism() -> float:
    data, spec = _toy_client()
    w = _toy_global(spec)
    collection = default_collection()
    worst = 0.0
    for algorithm in Algorithm:
        with_control = algorithm in (Algorithm.SCAFFOLD, Algorithm.FEDDYN)
        kwargs = dict(
            name=algorithm,
            state=ClientState.initial(0, spec.num_params, with_control),
            global_params=w,
            data=data,
            cfg=LocalConfig(),
            model=spec,
            batch_seed=3,
            server_control=zeros(spec.num_params),
        )
        first, second = collection.run(**kwargs), collection.run(**kwargs)
        worst = max(worst, _mismatch(first.params, second.params))
    return worst


@check("pflalign_state_bounds", 1e-9)
def check_state_bounds() -> float:
    """P and gamma stay in [0, 1] and alpha never exceeds 1 over several rounds."""
    data, spec = _toy_client()
    w = _toy_global(spec)
    cfg = LocalConfig()
    state = ClientState.initial(0, spec.num_params)
    worst = 0.0
    for r in range(10):
        result = pflalign_local_round(state, w, data, cfg, spec, 100 + r)
        trace = result.trace
        assert trace.P is not None and trace.gamma is not None and trace.m is not None
        for values in (trace.P, trace.gamma):
            worst = max(worst, float(-values.min()), float(values.max() - 1.0))
        state, w = result.state, result.params
    g = _rng("pflalign_state_bounds").normal(size=(50, spec.num_params))
    m, v, P = zeros(spec.num_params), zeros(spec.num_params), zeros(spec.num_params)
    for row in g:
        m, v, alpha, P = precondition_step(m, v, P, row, cfg.beta, cfg.epsilon)
        worst = max(worst, float(alpha.max() - 1.0))
    return worst


@check("aggregation_consistency_examples", 0.0)
def check_consistency_examples() -> float:
    cases = [
        (aggregation_consistency([[1.0, 0.0], [0.0, 1.0]], [3, 7]), 1.0),
        (aggregation_consistency([[3.0, 4.0]], [10]), 5.0),
        (aggregation_consistency([[2.0], [6.0]], [1, 3]), 5.0),
    ]
    return max(abs(got - want) for got, want in cases)


@check("preconditioner_divergence_diagnostic", diagnostic=True)
def check_divergence() -> float:
    """Reported, not asserted: the final mean gap between P and the PAC-Bayes mean."""
    rng = _rng("preconditioner_divergence_diagnostic")
    grads = 0.5 + rng.normal(size=(50, 8))
    gaps = oracles.preconditioner_divergence(grads)
    logger.info("preconditioner divergence first=%.4g last=%.4g", gaps[0], gaps[-1])
    return float(gaps[-1])


class CheckSuite:
    """A collection of numerical checks, run on worker threads in a fixed order."""

    def __init__(self, checks: Sequence[Check] | None = None):
        self.checks = tuple(CHECKS if checks is None else checks)
        self.check_map = {c.name: c for c in self.checks}

    def names(self) -> list[str]:
        return [c.name for c in self.checks]

    async def run(self, *, threads: int = 1) -> list[CheckResult]:
        results = await run_workers(list(self.checks), threads=threads)
        for result in results:
            log = logger.info if result else logger.error
            log(
                "check=%s pass=%s max_error=%s tolerance=%s",
                result.check_name,
                result.passed,
                result.max_error,
                result.tolerance,
            )
        return results

    def run_sync(self, *, threads: int = 1) -> list[CheckResult]:
        return asyncio.run(self.run(threads=threads))


def run_checks(names: Sequence[str] | None = None, *, threads: int = 1) -> list[CheckResult]:
    suite = CheckSuite()
    if names is not None:
        suite = CheckSuite([suite.check_map[n] for n in names])
    return suite.run_sync(threads=threads)


__all__ = ["CHECKS", "Check", "CheckResult", "CheckSuite", "check", "run_checks"]
