"""
Synchronous federated round loop, client sampling, aggregation and the FedYogi server rule.
"""

import asyncio
import hashlib
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, replace
from pflalign_sim._compat import StrEnum
from functools import partial

import numpy as np

from . import seeding
from .algorithms import (
    Algorithm,
    AlgorithmCollection,
    ClientState,
    LocalConfig,
    LocalResult,
    default_collection,
)
from .algorithms.run import run_workers
from .analysis.metrics import aggregation_consistency, gsnr
from .data import ClientDataset, DataConfig, build_datasets, dataset_digest
from .errors import AlgorithmError, ConfigError, ShapeMismatchError
from .models import ModelSpec, evaluate, init_params
from .params import ParamVector, check_same_length, freeze, norm2, weighted_average, zeros

logger = logging.getLogger(__name__)


class EvalMode(StrEnum):
    LOCAL = "local"
    OFFSET = "offset"


@dataclass(kw_only=True, frozen=True)
class YogiConfig:
    beta1: float = 0.9
    beta2: float = 0.99
    server_lr: float = 1e-1
    tau: float = 1e-3

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("yogi beta1 and beta2 must lie in [0, 1)")
        if self.server_lr <= 0 or self.tau <= 0:
            raise ConfigError("yogi server_lr and tau must be positive")


@dataclass(kw_only=True, frozen=True)
class FLConfig:
    rounds: int = 50
    num_clients: int = 4
    participation: float = 1.0
    algorithm: Algorithm = Algorithm.PFLALIGN
    local: LocalConfig = field(default_factory=LocalConfig)
    yogi: YogiConfig = field(default_factory=YogiConfig)
    master_seed: int = 0
    eval_mode: EvalMode = EvalMode.LOCAL
    round_timeout: float | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
            object.__setattr__(self, "eval_mode", EvalMode(self.eval_mode))
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.rounds < 1:
            raise ConfigError("rounds must be at least 1")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be at least 1")
        if not 0 < self.participation <= 1:
            raise ConfigError(
                f"participation must lie in (0, 1], got {self.participation}"
            )
        if self.round_timeout is not None and self.round_timeout <= 0:
            raise ConfigError("round_timeout must be positive")

    @property
    def clients_per_round(self) -> int:
        # tolerance keeps e.g. 0.3 * 10 from rounding up to 4
        return max(1, math.ceil(self.participation * self.num_clients - 1e-9))

    def replace(self, **kwargs) -> "FLConfig":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "num_clients": self.num_clients,
            "participation": self.participation,
            "algorithm": str(self.algorithm),
            "local": asdict(self.local),
            "yogi": asdict(self.yogi),
            "master_seed": self.master_seed,
            "eval_mode": str(self.eval_mode),
            "round_timeout": self.round_timeout,
        }


@dataclass(kw_only=True, frozen=True)
class ServerState:
    global_params: ParamVector
    round: int = 0
    yogi_m: ParamVector | None = None
    yogi_v: ParamVector | None = None
    scaffold_c: ParamVector | None = None

    @classmethod
    def initial(cls, global_params: ParamVector, algorithm: Algorithm) -> "ServerState":
        n = len(global_params)
        return cls(
            global_params=freeze(global_params, "global parameters"),
            yogi_m=zeros(n) if algorithm == Algorithm.FEDYOGI else None,
            yogi_v=zeros(n) if algorithm == Algorithm.FEDYOGI else None,
            scaffold_c=zeros(n) if algorithm == Algorithm.SCAFFOLD else None,
        )


@dataclass(kw_only=True, frozen=True)
class ClientMetrics:
    round: int
    client_id: int
    train_loss: float
    test_loss: float
    test_acc: float | None = None
    gsnr: float | None = None
    delta_norm: float = 0.0
    weight: float = 0.0

    def to_row(self) -> dict:
        return {
            "round": self.round,
            "client_id": self.client_id,
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            "test_acc": self.test_acc,
            "gsnr": self.gsnr,
            "delta_norm": self.delta_norm,
        }


@dataclass(kw_only=True, frozen=True)
class RoundLog:
    round: int
    algorithm: Algorithm
    clients: tuple[ClientMetrics, ...]
    consistency: float
    global_norm: float
    stream_hash: str
    traces: tuple[dict, ...] = ()

    @property
    def sampled(self) -> tuple[int, ...]:
        return tuple(c.client_id for c in self.clients)

    @property
    def mean_test_loss(self) -> float:
        return float(np.mean([c.test_loss for c in self.clients]))

    @property
    def mean_gsnr(self) -> float | None:
        values = [c.gsnr for c in self.clients if c.gsnr is not None]
        return float(np.mean(values)) if values else None


@dataclass(kw_only=True, frozen=True)
class RunLog:
    algorithm: Algorithm
    initial: tuple[ClientMetrics, ...]
    rounds: tuple[RoundLog, ...]
    final_params: ParamVector
    data_hash: str
    stream_hash: str
    hyperparameters: dict[str, float | bool] = field(default_factory=dict)

    def final_clients(self) -> dict[int, ClientMetrics]:
        """Last logged metrics of every client that participated at least once."""
        latest: dict[int, ClientMetrics] = {}
        for log in self.rounds:
            for metrics in log.clients:
                latest[metrics.client_id] = metrics
        return dict(sorted(latest.items()))

    def rows(self) -> list[dict]:
        return [m.to_row() for log in self.rounds for m in log.clients]


def fedyogi_server_update(
    yogi_m: ParamVector,
    yogi_v: ParamVector,
    mean_delta: ParamVector,
    cfg: YogiConfig,
) -> tuple[ParamVector, ParamVector, ParamVector]:
    """
    m' = b1 m + (1 - b1) d
    v' = v - (1 - b2) d^2 sign(v - d^2)
    step = lr m' / (sqrt(v') + tau)
    """
    check_same_length(yogi_m, yogi_v, mean_delta)
    d2 = mean_delta * mean_delta
    m_new = cfg.beta1 * yogi_m + (1.0 - cfg.beta1) * mean_delta
    v_new = yogi_v - (1.0 - cfg.beta2) * d2 * np.sign(yogi_v - d2)
    step = cfg.server_lr * m_new / (np.sqrt(np.maximum(v_new, 0.0)) + cfg.tau)
    return freeze(m_new, "yogi m"), freeze(v_new, "yogi v"), freeze(step, "yogi step")


def sample_clients(master_seed: int, round_index: int, num_clients: int, count: int) -> list[int]:
    """Uniform sample without replacement, returned in increasing client id order."""
    if not 1 <= count <= num_clients:
        raise AlgorithmError(f"cannot sample {count} of {num_clients} clients")
    rng = np.random.default_rng(seeding.sampling_seed(master_seed, round_index))
    return sorted(int(k) for k in rng.choice(num_clients, size=count, replace=False))


def _stream_digest(round_index: int, results: Sequence[LocalResult]) -> str:
    digest = hashlib.sha256()
    digest.update(str(round_index).encode())
    for result in results:
        digest.update(str(result.state.client_id).encode())
        digest.update(np.ascontiguousarray(result.batch_indices).tobytes())
    return digest.hexdigest()


async def run_round(
    server: ServerState,
    clients: Sequence[tuple[ClientState, ClientDataset]],
    cfg: FLConfig,
    model: ModelSpec,
    *,
    collection: AlgorithmCollection | None = None,
    threads: int = 1,
) -> tuple[ServerState, list[ClientState], RoundLog]:
    """
    One communication round: sample, run local rounds, aggregate.

    Aggregation weights are the client train sizes. Results are combined in
    client id order regardless of how many worker threads ran them.
    """
    if len(clients) != cfg.num_clients:
        raise ShapeMismatchError(
            f"{len(clients)} clients given, config expects {cfg.num_clients}"
        )
    collection = collection or default_collection()
    global_params = server.global_params
    if len(global_params) != model.num_params:
        raise ShapeMismatchError(
            f"global model has {len(global_params)} parameters, model expects {model.num_params}"
        )
    sampled = sample_clients(
        cfg.master_seed, server.round, cfg.num_clients, cfg.clients_per_round
    )
    if server.scaffold_c is None and cfg.algorithm == Algorithm.SCAFFOLD:
        raise AlgorithmError("scaffold run without a server control variate")

    jobs = [
        partial(
            collection.run,
            name=cfg.algorithm,
            state=clients[k][0],
            global_params=global_params,
            data=clients[k][1],
            cfg=cfg.local,
            model=model,
            batch_seed=seeding.batch_seed(cfg.master_seed, server.round, k),
            server_control=server.scaffold_c,
        )
        for k in sampled
    ]
    results: list[LocalResult] = await run_workers(
        jobs, threads=threads, timeout=cfg.round_timeout
    )

    sizes = [clients[k][1].size for k in sampled]
    total = float(sum(sizes))
    client_params = [r.params for r in results]

    yogi_m, yogi_v, scaffold_c = server.yogi_m, server.yogi_v, server.scaffold_c
    if cfg.algorithm == Algorithm.FEDYOGI:
        assert yogi_m is not None and yogi_v is not None
        mean_delta = weighted_average([p - global_params for p in client_params], sizes)
        yogi_m, yogi_v, step = fedyogi_server_update(yogi_m, yogi_v, mean_delta, cfg.yogi)
        new_global = freeze(global_params + step, "global parameters")
    else:
        new_global = weighted_average(client_params, sizes)

    if cfg.algorithm == Algorithm.SCAFFOLD:
        assert scaffold_c is not None
        deltas = [r.control_delta for r in results if r.control_delta is not None]
        if len(deltas) != len(results):
            raise AlgorithmError("scaffold client returned no control update")
        mean_dc = np.mean(np.stack(deltas), axis=0)
        scaffold_c = freeze(
            scaffold_c + (len(sampled) / cfg.num_clients) * mean_dc, "server control"
        )

    new_states = [state for state, _ in clients]
    metrics, traces = [], []
    for k, result, size in zip(sampled, results, sizes, strict=True):
        new_states[k] = result.state
        data = clients[k][1]
        if cfg.eval_mode == EvalMode.OFFSET:
            eval_params = freeze(new_global + result.state.delta, "offset model")
        else:
            eval_params = result.params
        test_loss, test_acc = evaluate(model, eval_params, data, "test")
        grads = result.trace.grads
        metrics.append(
            ClientMetrics(
                round=server.round,
                client_id=k,
                train_loss=result.train_loss,
                test_loss=test_loss,
                test_acc=test_acc,
                gsnr=gsnr(grads, cfg.local.epsilon) if len(grads) >= 2 else None,
                delta_norm=norm2(result.params - global_params),
                weight=size / total,
            )
        )
        traces.append({"client_id": k, **result.trace.to_json()})

    log = RoundLog(
        round=server.round,
        algorithm=cfg.algorithm,
        clients=tuple(metrics),
        consistency=aggregation_consistency(client_params, sizes),
        global_norm=norm2(new_global),
        stream_hash=_stream_digest(server.round, results),
        traces=tuple(traces),
    )
    new_server = replace(
        server,
        global_params=new_global,
        round=server.round + 1,
        yogi_m=yogi_m,
        yogi_v=yogi_v,
        scaffold_c=scaffold_c,
    )
    return new_server, new_states, log


def initial_metrics(
    model: ModelSpec, params: ParamVector, datasets: Sequence[ClientDataset]
) -> tuple[ClientMetrics, ...]:
    """Per-client metrics of the initial global model, before any training."""
    metrics = []
    for data in datasets:
        train_loss, _ = evaluate(model, params, data, "train")
        test_loss, test_acc = evaluate(model, params, data, "test")
        metrics.append(
            ClientMetrics(
                round=-1,
                client_id=data.client_id,
                train_loss=train_loss,
                test_loss=test_loss,
                test_acc=test_acc,
            )
        )
    return tuple(metrics)


async def run_experiment_async(
    cfg: FLConfig,
    data_cfg: DataConfig,
    model: ModelSpec,
    *,
    threads: int = 1,
    collection: AlgorithmCollection | None = None,
    datasets: Sequence[ClientDataset] | None = None,
    round_callback: Callable[[RoundLog], None] | None = None,
) -> RunLog:
    if data_cfg.num_clients != cfg.num_clients:
        raise ConfigError(
            f"data.num_clients={data_cfg.num_clients} but fl.num_clients={cfg.num_clients}"
        )
    if datasets is None:
        if data_cfg.seed is None:
            data_cfg = data_cfg.with_seed(seeding.data_seed(cfg.master_seed))
        datasets = build_datasets(data_cfg)
    data_hash = dataset_digest(datasets)
    logger.info(
        "experiment algorithm=%s clients=%d rounds=%d master_seed=%d data_hash=%s",
        cfg.algorithm,
        cfg.num_clients,
        cfg.rounds,
        cfg.master_seed,
        data_hash[:16],
    )

    rng = np.random.default_rng(seeding.init_seed(cfg.master_seed))
    server = ServerState.initial(init_params(model, rng), cfg.algorithm)
    initial = initial_metrics(model, server.global_params, datasets)

    with_control = cfg.algorithm in (Algorithm.SCAFFOLD, Algorithm.FEDDYN)
    states = [
        ClientState.initial(data.client_id, model.num_params, with_control)
        for data in datasets
    ]
    collection = collection or default_collection()
    names = collection.get(cfg.algorithm).to_params()["hyperparameters"]
    hyperparameters = {name: getattr(cfg.local, name) for name in names}
    logger.info(
        "hyperparameters algorithm=%s lr=%g %s", cfg.algorithm, cfg.local.lr, hyperparameters
    )
    stream = hashlib.sha256()
    logs = []
    for _ in range(cfg.rounds):
        server, states, log = await run_round(
            server,
            list(zip(states, datasets, strict=True)),
            cfg,
            model,
            collection=collection,
            threads=threads,
        )
        stream.update(log.stream_hash.encode())
        logs.append(log)
        logger.info(
            "round=%d algorithm=%s mean_test_loss=%.6g gsnr=%s consistency=%.6g",
            log.round,
            log.algorithm,
            log.mean_test_loss,
            "nan" if log.mean_gsnr is None else f"{log.mean_gsnr:.6g}",
            log.consistency,
        )
        if round_callback:
            round_callback(log)

    run_log = RunLog(
        algorithm=cfg.algorithm,
        initial=initial,
        rounds=tuple(logs),
        final_params=server.global_params,
        data_hash=data_hash,
        stream_hash=stream.hexdigest(),
        hyperparameters=hyperparameters,
    )
    logger.info(
        "finished algorithm=%s stream_hash=%s", cfg.algorithm, run_log.stream_hash[:16]
    )
    return run_log


def run_experiment(
    cfg: FLConfig,
    data_cfg: DataConfig,
    model: ModelSpec,
    *,
    threads: int = 1,
    **kwargs,
) -> RunLog:
    """Build data, initialize every state and run `cfg.rounds` rounds."""
    return asyncio.run(
        run_experiment_async(cfg, data_cfg, model, threads=threads, **kwargs)
    )
