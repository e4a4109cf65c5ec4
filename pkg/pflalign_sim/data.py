"""
Synthetic heterogeneous client datasets.

Two generators are provided: `distinct-tasks` gives every client its own task
(a private linear map for regression, a private label permutation of a shared
Gaussian mixture for classification); `dirichlet-skew` partitions one labeled
pool across clients with Dirichlet(alpha) class proportions.
"""

import hashlib
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, replace
from pflalign_sim._compat import StrEnum
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import DataError
from .models import Minibatch

logger = logging.getLogger(__name__)

MAX_PARTITION_ATTEMPTS = 1000


class Generator(StrEnum):
    DISTINCT_TASKS = "distinct-tasks"
    DIRICHLET_SKEW = "dirichlet-skew"


class Task(StrEnum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


@dataclass(kw_only=True, frozen=True)
class DataConfig:
    generator: Generator = Generator.DISTINCT_TASKS
    task: Task = Task.CLASSIFICATION
    num_clients: int = 4
    train_per_client: int = 300
    test_per_client: int = 200
    input_dim: int = 8
    num_classes: int = 4
    output_dim: int = 1
    dirichlet_alpha: float = 0.5
    noise_std: float = 0.0
    class_sep: float = 3.0
    min_client_size: int = 1
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "generator", Generator(self.generator))
        object.__setattr__(self, "task", Task(self.task))
        if self.num_clients < 1:
            raise DataError("num_clients must be at least 1")
        if self.train_per_client < 1 or self.test_per_client < 1:
            raise DataError("train_per_client and test_per_client must be at least 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise DataError("input_dim and output_dim must be positive")
        if self.task == Task.CLASSIFICATION and self.num_classes < 2:
            raise DataError("classification needs num_classes >= 2")
        if self.dirichlet_alpha <= 0:
            raise DataError(f"dirichlet_alpha must be > 0, got {self.dirichlet_alpha}")
        if self.noise_std < 0:
            raise DataError("noise_std must be nonnegative")

    def with_seed(self, seed: int) -> "DataConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {
            **asdict(self),
            "generator": str(self.generator),
            "task": str(self.task),
        }


@dataclass(kw_only=True, frozen=True)
class ClientDataset:
    client_id: int
    task_id: int
    train: Minibatch
    test: Minibatch
    pool_indices: NDArray[np.int64] | None = None

    @property
    def size(self) -> int:
        """|D_k|, the aggregation weight."""
        return len(self.train)


def _require_seed(cfg: DataConfig) -> int:
    if cfg.seed is None:
        raise DataError("data seed is not set")
    return cfg.seed


def _class_means(
    rng: np.random.Generator, num_classes: int, input_dim: int, class_sep: float
) -> NDArray[np.float64]:
    directions = rng.normal(size=(num_classes, input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return class_sep * directions


def _sample_mixture(
    rng: np.random.Generator,
    means: NDArray[np.float64],
    classes: NDArray[np.int64],
    noise_std: float,
) -> NDArray[np.float64]:
    inputs = means[classes] + rng.normal(size=(len(classes), means.shape[1]))
    if noise_std > 0:
        inputs += noise_std * rng.normal(size=inputs.shape)
    return inputs


def _distinct_permutations(
    rng: np.random.Generator, num_classes: int, count: int
) -> list[NDArray[np.int64]]:
    available = math.factorial(num_classes) if num_classes <= 12 else math.inf
    seen: set[tuple[int, ...]] = set()
    perms = []
    for _ in range(count):
        perm = rng.permutation(num_classes)
        while tuple(perm) in seen and len(seen) < available:
            perm = rng.permutation(num_classes)
        seen.add(tuple(perm))
        perms.append(perm)
    return perms


def _split(inputs, targets, n_train: int) -> tuple[Minibatch, Minibatch]:
    return (
        Minibatch(inputs=inputs[:n_train], targets=targets[:n_train]),
        Minibatch(inputs=inputs[n_train:], targets=targets[n_train:]),
    )


def make_distinct_tasks(cfg: DataConfig) -> list[ClientDataset]:
    """One task per client; client k gets task k."""
    if cfg.generator != Generator.DISTINCT_TASKS:
        raise DataError(f"make_distinct_tasks got generator {cfg.generator}")
    shared, *per_client = np.random.SeedSequence(_require_seed(cfg)).spawn(
        cfg.num_clients + 1
    )
    shared_rng = np.random.default_rng(shared)
    n_total = cfg.train_per_client + cfg.test_per_client

    datasets = []
    if cfg.task == Task.REGRESSION:
        for k, child in enumerate(per_client):
            rng = np.random.default_rng(child)
            maps = rng.normal(
                scale=1.0 / np.sqrt(cfg.input_dim), size=(cfg.output_dim, cfg.input_dim)
            )
            inputs = rng.normal(size=(n_total, cfg.input_dim))
            targets = inputs @ maps.T
            if cfg.noise_std > 0:
                targets += cfg.noise_std * rng.normal(size=targets.shape)
            train, test = _split(inputs, targets, cfg.train_per_client)
            datasets.append(ClientDataset(client_id=k, task_id=k, train=train, test=test))
        return datasets

    means = _class_means(shared_rng, cfg.num_classes, cfg.input_dim, cfg.class_sep)
    perms = _distinct_permutations(shared_rng, cfg.num_classes, cfg.num_clients)
    for k, child in enumerate(per_client):
        rng = np.random.default_rng(child)
        classes = rng.integers(0, cfg.num_classes, size=n_total)
        inputs = _sample_mixture(rng, means, classes, cfg.noise_std)
        labels = perms[k][classes].astype(np.int64)
        train, test = _split(inputs, labels, cfg.train_per_client)
        datasets.append(ClientDataset(client_id=k, task_id=k, train=train, test=test))
    return datasets


def dirichlet_partition(
    rng: np.random.Generator,
    labels: NDArray[np.int64],
    num_clients: int,
    alpha: float,
    min_size: int = 1,
) -> list[NDArray[np.int64]]:
    """Split sample indices so that each class is spread over clients with Dirichlet(alpha) shares."""
    if alpha <= 0:
        raise DataError(f"dirichlet alpha must be > 0, got {alpha}")
    if len(labels) < num_clients * min_size:
        raise DataError(
            f"pool of {len(labels)} samples is too small for {num_clients} clients"
        )
    classes = np.unique(labels)
    for attempt in range(MAX_PARTITION_ATTEMPTS):
        parts: list[list[NDArray[np.int64]]] = [[] for _ in range(num_clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            shares = rng.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(shares)[:-1] * len(idx)).astype(np.int64)
            for k, chunk in enumerate(np.split(idx, cuts)):
                parts[k].append(chunk)
        assignment = [np.sort(np.concatenate(p)) for p in parts]
        if min(len(a) for a in assignment) >= min_size:
            if attempt:
                logger.debug("dirichlet partition accepted after %d redraws", attempt)
            return assignment
    raise DataError(
        f"no partition with every client holding >= {min_size} samples "
        f"after {MAX_PARTITION_ATTEMPTS} draws (alpha={alpha})"
    )


def make_dirichlet_skew(cfg: DataConfig) -> list[ClientDataset]:
    """Partition a shared labeled pool; each client's test set follows its own class mix."""
    if cfg.generator != Generator.DIRICHLET_SKEW:
        raise DataError(f"make_dirichlet_skew got generator {cfg.generator}")
    if cfg.task != Task.CLASSIFICATION:
        raise DataError("dirichlet-skew needs a classification task")
    rng = np.random.default_rng(np.random.SeedSequence(_require_seed(cfg)))
    means = _class_means(rng, cfg.num_classes, cfg.input_dim, cfg.class_sep)

    pool_size = cfg.num_clients * cfg.train_per_client
    labels = rng.permutation(np.arange(pool_size) % cfg.num_classes).astype(np.int64)
    pool = Minibatch(
        inputs=_sample_mixture(rng, means, labels, cfg.noise_std), targets=labels
    )
    assignment = dirichlet_partition(
        rng, labels, cfg.num_clients, cfg.dirichlet_alpha, cfg.min_client_size
    )

    datasets = []
    for k, indices in enumerate(assignment):
        train = pool.take(indices)
        mix = np.bincount(train.targets, minlength=cfg.num_classes) / len(train)
        test_labels = rng.choice(cfg.num_classes, size=cfg.test_per_client, p=mix)
        test = Minibatch(
            inputs=_sample_mixture(rng, means, test_labels, cfg.noise_std),
            targets=test_labels.astype(np.int64),
        )
        datasets.append(
            ClientDataset(
                client_id=k, task_id=k, train=train, test=test, pool_indices=indices
            )
        )
    return datasets


def build_datasets(cfg: DataConfig) -> list[ClientDataset]:
    if cfg.generator == Generator.DISTINCT_TASKS:
        return make_distinct_tasks(cfg)
    return make_dirichlet_skew(cfg)


def minibatch_indices(
    seed: int, pool_size: int, steps: int, batch_size: int
) -> NDArray[np.int64]:
    """Uniform with-replacement sampling schedule, one row of indices per local step."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, pool_size, size=(steps, batch_size))


def dataset_digest(datasets: Sequence[ClientDataset]) -> str:
    digest = hashlib.sha256()
    for ds in datasets:
        for batch in (ds.train, ds.test):
            digest.update(np.ascontiguousarray(batch.inputs).tobytes())
            digest.update(np.ascontiguousarray(batch.targets).tobytes())
    return digest.hexdigest()


def _batch_to_json(batch: Minibatch) -> dict:
    return {"inputs": batch.inputs.tolist(), "targets": batch.targets.tolist()}


def _batch_from_json(raw: dict, classification: bool) -> Minibatch:
    dtype = np.int64 if classification else np.float64
    return Minibatch(
        inputs=np.asarray(raw["inputs"], dtype=np.float64),
        targets=np.asarray(raw["targets"], dtype=dtype),
    )


def save_datasets(
    path: Path, cfg: DataConfig, datasets: Sequence[ClientDataset]
) -> None:
    """Write the config echo plus row-major arrays of every client."""
    payload = {
        "config": cfg.to_dict(),
        "clients": [
            {
                "client_id": ds.client_id,
                "task_id": ds.task_id,
                "train": _batch_to_json(ds.train),
                "test": _batch_to_json(ds.test),
                "pool_indices": None
                if ds.pool_indices is None
                else ds.pool_indices.tolist(),
            }
            for ds in datasets
        ],
    }
    try:
        Path(path).write_text(json.dumps(payload))
    except OSError as e:
        raise DataError(f"Ran into {e} while trying to write to {path}") from None


def load_datasets(path: Path) -> tuple[DataConfig, list[ClientDataset]]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Ran into {e} while trying to read {path}") from None
    cfg = DataConfig(**payload["config"])
    classification = cfg.task == Task.CLASSIFICATION
    datasets = [
        ClientDataset(
            client_id=raw["client_id"],
            task_id=raw["task_id"],
            train=_batch_from_json(raw["train"], classification),
            test=_batch_from_json(raw["test"], classification),
            pool_indices=None
            if raw["pool_indices"] is None
            else np.asarray(raw["pool_indices"], dtype=np.int64),
        )
        for raw in payload["clients"]
    ]
    return cfg, datasets
