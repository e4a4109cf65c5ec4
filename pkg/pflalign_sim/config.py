"""
Experiment configuration: a strict JSON schema plus typed, frozen dataclasses.

A config file has three sections, `model`, `data` and `fl`. Unknown keys are
rejected at every level; omitted optional keys take the dataclass defaults.
"""

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from jsonschema import Draft202012Validator
from jsonschema.exceptions import best_match

from .algorithms import Algorithm, LocalConfig
from .data import DataConfig, Generator, Task
from .errors import ConfigError, SimulationError
from .models import Activation, LossKind, ModelKind, ModelSpec
from .server import EvalMode, FLConfig, YogiConfig

logger = logging.getLogger(__name__)

THREADS_ENV = "PFLALIGN_THREADS"


def _enum(values) -> dict:
    return {"enum": [str(v) for v in values]}


_POSITIVE_INT = {"type": "integer", "minimum": 1}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_NONNEGATIVE = {"type": "number", "minimum": 0}

CONFIG_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "data", "fl"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "input_dim", "output_dim"],
            "properties": {
                "kind": _enum(ModelKind),
                "input_dim": _POSITIVE_INT,
                "output_dim": _POSITIVE_INT,
                "hidden_dim": {"type": ["integer", "null"], "minimum": 1},
                "activation": _enum(Activation),
                "loss": {"enum": [*(str(v) for v in LossKind), None]},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "generator": _enum(Generator),
                "task": _enum(Task),
                "num_clients": _POSITIVE_INT,
                "train_per_client": _POSITIVE_INT,
                "test_per_client": _POSITIVE_INT,
                "input_dim": _POSITIVE_INT,
                "num_classes": {"type": "integer", "minimum": 2},
                "output_dim": _POSITIVE_INT,
                "dirichlet_alpha": _POSITIVE,
                "noise_std": _NONNEGATIVE,
                "class_sep": _NONNEGATIVE,
                "min_client_size": _POSITIVE_INT,
                "seed": {"type": ["integer", "null"], "minimum": 0},
            },
        },
        "fl": {
            "type": "object",
            "additionalProperties": False,
            "required": ["algorithm"],
            "properties": {
                "rounds": _POSITIVE_INT,
                "num_clients": _POSITIVE_INT,
                "participation": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "algorithm": _enum(Algorithm),
                "master_seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
                "eval_mode": _enum(EvalMode),
                "round_timeout": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "local": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "local_steps": _POSITIVE_INT,
                        "batch_size": _POSITIVE_INT,
                        "lr": _POSITIVE,
                        "beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "epsilon": _POSITIVE,
                        "prox_mu": _NONNEGATIVE,
                        "sam_rho": _NONNEGATIVE,
                        "dyn_alpha": _NONNEGATIVE,
                        "clip_preconditioner": {"type": "boolean"},
                        "personal_init": {"type": "boolean"},
                        "align_correction": {"type": "boolean"},
                        "precondition": {"type": "boolean"},
                    },
                },
                "yogi": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "server_lr": _POSITIVE,
                        "tau": _POSITIVE,
                    },
                },
            },
        },
    },
}

_VALIDATOR = Draft202012Validator(CONFIG_SCHEMA)


@dataclass(kw_only=True, frozen=True)
class ExperimentConfig:
    model: ModelSpec
    data: DataConfig
    fl: FLConfig

    def __post_init__(self):
        if self.data.num_clients != self.fl.num_clients:
            raise ConfigError(
                f"data.num_clients={self.data.num_clients} does not match "
                f"fl.num_clients={self.fl.num_clients}"
            )
        if self.model.input_dim != self.data.input_dim:
            raise ConfigError(
                f"model.input_dim={self.model.input_dim} does not match "
                f"data.input_dim={self.data.input_dim}"
            )
        if self.data.task == Task.CLASSIFICATION:
            if not self.model.is_classifier:
                raise ConfigError("model.loss must be cross-entropy for a classification task")
            if self.model.output_dim != self.data.num_classes:
                raise ConfigError(
                    f"model.output_dim={self.model.output_dim} does not match "
                    f"data.num_classes={self.data.num_classes}"
                )
        else:
            if self.model.is_classifier:
                raise ConfigError("model.loss must be mse for a regression task")
            if self.model.output_dim != self.data.output_dim:
                raise ConfigError(
                    f"model.output_dim={self.model.output_dim} does not match "
                    f"data.output_dim={self.data.output_dim}"
                )

    def with_fl(self, **kwargs) -> "ExperimentConfig":
        return ExperimentConfig(model=self.model, data=self.data, fl=self.fl.replace(**kwargs))

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "fl": self.fl.to_dict(),
        }


def _error_path(error) -> str:
    path = ".".join(str(p) for p in error.absolute_path)
    return path or "<root>"


def validate_config(raw: Any) -> None:
    """Raise ConfigError naming the offending key when `raw` does not match the schema."""
    error = best_match(_VALIDATOR.iter_errors(raw))
    if error is not None:
        raise ConfigError(f"invalid config at {_error_path(error)}: {error.message}")


def parse_config(raw: dict) -> ExperimentConfig:
    validate_config(raw)
    fl_raw = dict(raw["fl"])
    local = fl_raw.pop("local", {})
    yogi = fl_raw.pop("yogi", {})
    try:
        return ExperimentConfig(
            model=ModelSpec(**raw["model"]),
            data=DataConfig(**raw["data"]),
            fl=FLConfig(local=LocalConfig(**local), yogi=YogiConfig(**yogi), **fl_raw),
        )
    except ConfigError:
        raise
    except SimulationError as e:
        raise ConfigError(f"invalid config: {e.message}") from None


def load_config(path: Path | str) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"Ran into {e} while trying to read {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from None
    cfg = parse_config(raw)
    logger.debug("loaded config from %s", path)
    return cfg


def resolve_threads(threads: int | None = None) -> int:
    """Explicit value first, then the PFLALIGN_THREADS environment variable, then 1."""
    if threads is None:
        value = os.environ.get(THREADS_ENV)
        if not value:
            return 1
        try:
            threads = int(value)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    if threads < 1:
        raise ConfigError(f"threads must be at least 1, got {threads}")
    return threads
