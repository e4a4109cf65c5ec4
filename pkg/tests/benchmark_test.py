"""
Directional desk-scale comparisons on the distinct-tasks benchmark. Run with --runslow.

On this benchmark the preconditioner settles near P = 0.03, so pFLAlign steps
with roughly lr * 0.03 and ends behind FedAvg. Measured at the tuned lr over
seeds 0, 1, 2: final test loss pflalign [1.166, 1.313, 1.354] against fedavg
[0.914, 0.993, 1.072]; pflalign GSNR first [1.49, 1.34, 2.72], last
[1.35, 1.58, 1.23]. The directional comparisons are kept as expected failures
so a change that flips them shows up as XPASS.
"""

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from pflalign_sim.algorithms import Algorithm
from pflalign_sim.analysis.metrics import student_t_interval
from pflalign_sim.config import load_config
from pflalign_sim.server import RunLog, run_experiment

logger = logging.getLogger(__name__)

BENCHMARK = Path(__file__).parent.parent / "configs" / "default.json"
SEEDS = (0, 1, 2)
LR_GRID = (4e-2, 1e-2, 4e-3)


def _final_mean(run_log: RunLog, field: str) -> float:
    return float(np.mean([getattr(m, field) for m in run_log.final_clients().values()]))


def _tuned_runs(algorithm: Algorithm) -> dict[int, RunLog]:
    cfg = load_config(BENCHMARK)
    best = None
    for lr in LR_GRID:
        runs = {}
        for seed in SEEDS:
            run_cfg = cfg.with_fl(
                algorithm=algorithm, master_seed=seed, local=replace(cfg.fl.local, lr=lr)
            )
            runs[seed] = run_experiment(run_cfg.fl, run_cfg.data, run_cfg.model)
        score = np.mean([_final_mean(r, "train_loss") for r in runs.values()])
        if best is None or score < best[0]:
            best = (score, runs)
    assert best is not None
    return best[1]


@pytest.fixture(scope="module")
def benchmark_runs() -> dict[Algorithm, dict[int, RunLog]]:
    return {a: _tuned_runs(a) for a in (Algorithm.PFLALIGN, Algorithm.FEDAVG)}


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="pflalign trails fedavg on test loss at T=5, see module docstring")
def test_pflalign_test_loss_not_worse_than_fedavg(benchmark_runs):
    ours = [_final_mean(benchmark_runs[Algorithm.PFLALIGN][s], "test_loss") for s in SEEDS]
    base = [_final_mean(benchmark_runs[Algorithm.FEDAVG][s], "test_loss") for s in SEEDS]
    logger.info("final test loss pflalign=%s fedavg=%s", ours, base)
    assert sum(a <= b for a, b in zip(ours, base, strict=True)) >= 2

    base_mean, half_width = student_t_interval(base)
    assert half_width is not None
    assert np.mean(ours) <= base_mean + half_width


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="gsnr rises in only one of three seeds, see module docstring")
def test_pflalign_gsnr_increases(benchmark_runs):
    runs = benchmark_runs[Algorithm.PFLALIGN]
    first = [runs[s].rounds[0].mean_gsnr for s in SEEDS]
    last = [runs[s].rounds[-1].mean_gsnr for s in SEEDS]
    fedavg = [benchmark_runs[Algorithm.FEDAVG][s].rounds[-1].mean_gsnr for s in SEEDS]
    logger.info("gsnr pflalign first=%s last=%s fedavg last=%s", first, last, fedavg)
    assert sum(b > a for a, b in zip(first, last, strict=True)) >= 2


@pytest.mark.slow
def test_benchmark_consistency_is_finite(benchmark_runs):
    for runs in benchmark_runs.values():
        for run_log in runs.values():
            assert all(np.isfinite(log.consistency) for log in run_log.rounds)


@pytest.mark.slow
def test_preconditioner_shrinks_the_effective_step(benchmark_runs):
    for seed, run_log in benchmark_runs[Algorithm.PFLALIGN].items():
        final_p = np.mean([trace["mean_P"][-1] for trace in run_log.rounds[-1].traces])
        logger.info("seed=%d final mean P=%.4g", seed, final_p)
        assert 0 < final_p < 0.2

