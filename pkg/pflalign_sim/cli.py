"""
Command-line entry point.

    python app.py run --config configs/smoke.json --out runs/smoke
    python app.py verify --out verify_report.json
    python app.py compare --config configs/default.json --algorithms pflalign,fedavg \
        --seeds 0,1,2 --lr-grid 4e-2,1e-2,4e-3 --out runs/compare
"""

import argparse
import logging
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import export
from .algorithms import Algorithm
from .analysis.metrics import student_t_interval
from .analysis.verify import CheckSuite
from .config import ExperimentConfig, load_config, resolve_threads
from .errors import ConfigError, SimulationError
from .server import RunLog, run_experiment

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

COMPARE_COLUMNS = (
    "algorithm",
    "lr",
    "seed",
    "client_id",
    "train_loss",
    "test_loss",
    "test_acc",
    "gsnr",
    "delta_norm",
)


def _run(cfg: ExperimentConfig, threads: int) -> RunLog:
    return run_experiment(cfg.fl, cfg.data, cfg.model, threads=threads)


def cmd_run(config_path: Path, out_dir: Path, *, threads: int | None = None) -> int:
    """Run one experiment and write metrics.csv, summary.json, traces.json and manifest.json."""
    cfg = load_config(config_path)
    threads = resolve_threads(threads)
    manifest = export.RunManifest(config=cfg.to_dict())
    run_log = _run(cfg, threads)

    out_dir = Path(out_dir)
    manifest.add_output("metrics", export.write_metrics_csv(out_dir / "metrics.csv", run_log))
    manifest.add_output(
        "summary", export.write_summary(out_dir / "summary.json", cfg.to_dict(), run_log)
    )
    manifest.add_output("traces", export.write_traces(out_dir / "traces.json", run_log))
    manifest.write(out_dir / "manifest.json")
    return 0


def cmd_verify(
    out_path: Path,
    *,
    threads: int | None = None,
    checks: Sequence[str] | None = None,
) -> int:
    """Run the numerical check suite and write the JSON report; 0 iff every check passes."""
    suite = CheckSuite()
    if checks:
        unknown = [name for name in checks if name not in suite.check_map]
        if unknown:
            raise ConfigError(f"unknown checks: {', '.join(unknown)}")
        suite = CheckSuite([suite.check_map[name] for name in checks])
    results = suite.run_sync(threads=resolve_threads(threads))
    export.write_json(Path(out_path), [r.to_json() for r in results])
    failed = [r.check_name for r in results if not r]
    if failed:
        logger.error("%d of %d checks failed: %s", len(failed), len(results), ", ".join(failed))
        return 1
    logger.info("all %d checks passed", len(results))
    return 0


def _final_train_loss(run_log: RunLog) -> float:
    return float(np.mean([m.train_loss for m in run_log.final_clients().values()]))


def _final_test_loss(run_log: RunLog) -> float:
    return float(np.mean([m.test_loss for m in run_log.final_clients().values()]))


def _run_seeds(
    cfg: ExperimentConfig, algorithm: Algorithm, seeds: Sequence[int], lr: float, threads: int
) -> dict[int, RunLog]:
    runs = {}
    for seed in seeds:
        run_cfg = cfg.with_fl(
            algorithm=algorithm, master_seed=seed, local=replace(cfg.fl.local, lr=lr)
        )
        runs[seed] = _run(run_cfg, threads)
    return runs


def _parse_algorithms(names: Sequence[str]) -> list[Algorithm]:
    try:
        return [Algorithm(name) for name in names]
    except ValueError as e:
        raise ConfigError(f"--algorithms: {e}") from None


def cmd_compare(
    config_path: Path,
    algorithms: Sequence[str],
    seeds: Sequence[int],
    out_dir: Path,
    *,
    lr_grid: Sequence[float] | None = None,
    threads: int | None = None,
) -> int:
    """
    Run every algorithm on the same data and seeds. With `lr_grid`, each
    algorithm keeps the learning rate with the lowest mean final train loss.
    """
    cfg = load_config(config_path)
    threads = resolve_threads(threads)
    chosen = _parse_algorithms(algorithms or [str(cfg.fl.algorithm)])
    seeds = list(seeds) or [cfg.fl.master_seed]
    grid = list(lr_grid) if lr_grid else [cfg.fl.local.lr]
    manifest = export.RunManifest(config=cfg.to_dict())

    results: dict[Algorithm, tuple[float, dict[int, RunLog]]] = {}
    for algorithm in chosen:
        best = None
        for lr in grid:
            runs = _run_seeds(cfg, algorithm, seeds, lr, threads)
            score = float(np.mean([_final_train_loss(r) for r in runs.values()]))
            logger.info("compare algorithm=%s lr=%g mean_final_train_loss=%.6g", algorithm, lr, score)
            if best is None or score < best[0]:
                best = (score, lr, runs)
        assert best is not None
        results[algorithm] = (best[1], best[2])

    fair = True
    for seed in seeds:
        hashes = {(results[a][1][seed].data_hash, results[a][1][seed].stream_hash) for a in chosen}
        data_hash, stream_hash = next(iter(hashes))
        logger.info(
            "seed=%d data_hash=%s stream_hash=%s", seed, data_hash[:16], stream_hash[:16]
        )
        if len(hashes) != 1:
            fair = False
            logger.error("seed=%d algorithms consumed different data or minibatch streams", seed)

    rows, table = [], {}
    for algorithm, (lr, runs) in results.items():
        for seed, run_log in runs.items():
            for m in run_log.final_clients().values():
                row = m.to_row()
                del row["round"]
                rows.append({"algorithm": str(algorithm), "lr": lr, "seed": seed, **row})
        per_seed = [_final_test_loss(runs[s]) for s in seeds]
        mean, half_width = student_t_interval(per_seed)
        table[str(algorithm)] = {
            "lr": lr,
            "per_seed_mean_test_loss": per_seed,
            "mean_test_loss": mean,
            "ci95_half_width": half_width,
            "final_gsnr": [runs[s].rounds[-1].mean_gsnr for s in seeds],
            "first_gsnr": [runs[s].rounds[0].mean_gsnr for s in seeds],
        }
        logger.info(
            "algorithm=%s lr=%g mean_test_loss=%.6g ci95=%s",
            algorithm,
            lr,
            mean,
            "undefined" if half_width is None else f"{half_width:.6g}",
        )

    out_dir = Path(out_dir)
    manifest.add_output(
        "compare", export.write_csv(out_dir / "compare.csv", rows, COMPARE_COLUMNS)
    )
    manifest.add_output(
        "summary",
        export.write_json(
            out_dir / "compare_summary.json",
            {"seeds": seeds, "fair": fair, "algorithms": table},
        ),
    )
    manifest.write(out_dir / "manifest.json")
    return 0 if fair else 1


def _comma_list(cast):
    def parse(value: str):
        try:
            return [cast(item.strip()) for item in value.split(",") if item.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e)) from None

    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="client worker threads")
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )

    parser = argparse.ArgumentParser(
        prog="pflalign", description="Federated personalization simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="run one experiment")
    run.add_argument("--config", type=Path, required=True)
    run.add_argument("--out", type=Path, required=True)

    verify = sub.add_parser("verify", parents=[common], help="run the numerical checks")
    verify.add_argument("--out", type=Path, default=Path("verify_report.json"))
    verify.add_argument("--checks", type=_comma_list(str), default=None)

    compare = sub.add_parser("compare", parents=[common], help="compare algorithms across seeds")
    compare.add_argument("--config", type=Path, required=True)
    compare.add_argument("--out", type=Path, required=True)
    compare.add_argument("--algorithms", type=_comma_list(str), default=[])
    compare.add_argument("--seeds", type=_comma_list(int), default=[])
    compare.add_argument("--lr-grid", type=_comma_list(float), default=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    try:
        match args.command:
            case "run":
                return cmd_run(args.config, args.out, threads=args.threads)
            case "verify":
                return cmd_verify(args.out, threads=args.threads, checks=args.checks)
            case "compare":
                return cmd_compare(
                    args.config,
                    args.algorithms,
                    args.seeds,
                    args.out,
                    lr_grid=args.lr_grid,
                    threads=args.threads,
                )
            case _:
                raise RuntimeError("unreachable")
    except SimulationError as e:
        logger.error("%s", e.message)
        sys.stderr.write(f"error: {e.message}\n")
        return 2
