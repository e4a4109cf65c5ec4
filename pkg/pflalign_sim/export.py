"""Writers for run artifacts: metrics CSV, summary JSON, step traces and the run manifest."""

import csv
import json
import logging
import os
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import SimulationError
from .server import ClientMetrics, RunLog

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "round",
    "client_id",
    "train_loss",
    "test_loss",
    "test_acc",
    "gsnr",
    "delta_norm",
)


class ExportError(SimulationError):
    """An artifact could not be written."""


def _write_text_atomic(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(text)
        os.replace(tmp, path)
    except OSError as e:
        raise ExportError(f"Ran into {e} while trying to write to {path}") from None


def write_csv(path: Path, rows: Iterable[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    except OSError as e:
        raise ExportError(f"Ran into {e} while trying to write to {path}") from None
    return path


def write_metrics_csv(path: Path, run_log: RunLog) -> Path:
    """One row per (round, participating client)."""
    return write_csv(path, run_log.rows(), METRIC_COLUMNS)


def _metrics_json(metrics: Iterable[ClientMetrics]) -> list[dict]:
    return [asdict(m) for m in metrics]


def summary(config: dict, run_log: RunLog) -> dict:
    last = run_log.rounds[-1] if run_log.rounds else None
    return {
        "config": config,
        "algorithm": str(run_log.algorithm),
        "rounds": len(run_log.rounds),
        "data_hash": run_log.data_hash,
        "stream_hash": run_log.stream_hash,
        "hyperparameters": run_log.hyperparameters,
        "initial": _metrics_json(run_log.initial),
        "final": _metrics_json(run_log.final_clients().values()),
        "final_consistency": last.consistency if last else None,
        "final_global_norm": last.global_norm if last else None,
        "final_params": run_log.final_params.tolist(),
    }


def write_summary(path: Path, config: dict, run_log: RunLog) -> Path:
    _write_text_atomic(path, json.dumps(summary(config, run_log), indent=2) + "\n")
    return Path(path)


def write_traces(path: Path, run_log: RunLog) -> Path:
    """Per-round, per-client step traces (loss, gradient norm, mean gamma, mean P)."""
    payload = [
        {"round": log.round, "clients": list(log.traces)} for log in run_log.rounds
    ]
    _write_text_atomic(path, json.dumps(payload) + "\n")
    return Path(path)


def write_json(path: Path, payload) -> Path:
    _write_text_atomic(path, json.dumps(payload, indent=2) + "\n")
    return Path(path)


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass(kw_only=True)
class RunManifest:
    config: dict
    version: str = __version__
    started_at: str = field(default_factory=utc_now)
    finished_at: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)

    def add_output(self, name: str, path: Path) -> None:
        self.outputs[name] = str(path)

    def write(self, path: Path) -> Path:
        """Stamp the end time and write the manifest in one atomic replace."""
        self.finished_at = utc_now()
        _write_text_atomic(path, json.dumps(asdict(self), indent=2) + "\n")
        logger.info("wrote manifest %s", path)
        return Path(path)

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise ExportError(f"Ran into {e} while trying to read {path}") from None
