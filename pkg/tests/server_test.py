from unittest import mock

import numpy as np
import pytest

from pflalign_sim import seeding
from pflalign_sim.algorithms import (
    Algorithm,
    AlgorithmCollection,
    ClientState,
    LocalConfig,
    LocalResult,
    StepTrace,
)
from pflalign_sim.algorithms.sgd import local_sgd
from pflalign_sim.data import DataConfig, Task, build_datasets
from pflalign_sim.errors import ConfigError, ShapeMismatchError
from pflalign_sim.models import ModelKind, ModelSpec, evaluate, init_params
from pflalign_sim.server import (
    EvalMode,
    FLConfig,
    ServerState,
    YogiConfig,
    fedyogi_server_update,
    run_experiment,
    run_round,
    sample_clients,
)


def vec(*values):
    return np.array(values, dtype=np.float64)


class FixedOutput:
    """Local rule stub returning preset parameters per client."""

    def __init__(self, outputs, name=Algorithm.FEDAVG):
        self.outputs = outputs
        self.name = name

    def to_params(self):
        return {"name": str(self.name), "hyperparameters": []}

    def __call__(self, *, state, global_params, data, cfg, model, batch_seed, server_control=None):
        params = self.outputs[state.client_id]
        return LocalResult(
            params=params,
            state=state.replace(delta=params - global_params),
            trace=StepTrace(losses=np.ones(2), grads=np.zeros((2, len(params)))),
            batch_indices=np.zeros((2, 1), dtype=np.int64),
        )


def fixed_collection(outputs, name=Algorithm.FEDAVG):
    return AlgorithmCollection(FixedOutput(outputs, name))


async def test_weighted_aggregation(scalar_spec, target_client):
    clients = [
        (ClientState.initial(0, 2), target_client(0.0, size=300, client_id=0)),
        (ClientState.initial(1, 2), target_client(0.0, size=100, client_id=1)),
    ]
    collection = fixed_collection({0: vec(1.0, 1.0), 1: vec(5.0, 5.0)})
    cfg = FLConfig(algorithm=Algorithm.FEDAVG, num_clients=2)
    server, states, log = await run_round(
        ServerState.initial(vec(0.0, 0.0), cfg.algorithm), clients, cfg, scalar_spec, collection=collection
    )
    np.testing.assert_allclose(server.global_params, [2.0, 2.0])
    assert server.round == 1
    assert [m.weight for m in log.clients] == [0.75, 0.25]
    assert log.consistency == pytest.approx(0.75 * np.sqrt(2) + 0.25 * np.sqrt(50))
    np.testing.assert_array_equal(states[1].delta, [5.0, 5.0])


async def test_single_client_fedavg_takes_local_output(scalar_spec, target_client):
    cfg = FLConfig(algorithm=Algorithm.FEDAVG, num_clients=1, local=LocalConfig(lr=0.1))
    data = target_client(3.0)
    server = ServerState.initial(vec(0.0, 0.0), cfg.algorithm)
    new_server, _, _ = await run_round(server, [(ClientState.initial(0, 2), data)], cfg, scalar_spec)
    expected, _, _ = local_sgd(server.global_params, data, cfg.local, scalar_spec, seeding.batch_seed(0, 0, 0))
    np.testing.assert_array_equal(new_server.global_params, expected)


async def test_identical_outputs_are_kept_exactly(scalar_spec, target_client):
    w = vec(0.1, 0.7)
    clients = [(ClientState.initial(k, 2), target_client(0.0, size=10 + k, client_id=k)) for k in range(3)]
    cfg = FLConfig(algorithm=Algorithm.FEDAVG, num_clients=3)
    server, _, _ = await run_round(
        ServerState.initial(vec(0.0, 0.0), cfg.algorithm),
        clients,
        cfg,
        scalar_spec,
        collection=fixed_collection({k: w for k in range(3)}),
    )
    np.testing.assert_array_equal(server.global_params, w)


async def test_client_count_must_match(scalar_spec, target_client):
    cfg = FLConfig(num_clients=2)
    with pytest.raises(ShapeMismatchError):
        await run_round(
            ServerState.initial(vec(0.0, 0.0), cfg.algorithm),
            [(ClientState.initial(0, 2), target_client(1.0))],
            cfg,
            scalar_spec,
        )


def test_yogi_zero_delta():
    m, v, step = fedyogi_server_update(vec(0.0), vec(0.3), vec(0.0), YogiConfig())
    assert step[0] == 0.0 and m[0] == 0.0


def test_yogi_v_fixed_point():
    d = vec(0.5, -2.0)
    _, v, _ = fedyogi_server_update(vec(0.0, 0.0), d * d, d, YogiConfig())
    np.testing.assert_array_equal(v, d * d)


def test_yogi_hand_evaluation():
    cfg = YogiConfig(beta1=0.9, beta2=0.99, tau=1e-3, server_lr=1.0)
    m, v, step = fedyogi_server_update(vec(0.0), vec(0.0), vec(1.0), cfg)
    assert m[0] == pytest.approx(0.1)
    assert v[0] == pytest.approx(0.01)
    assert step[0] == pytest.approx(0.1 / 0.101)


async def test_fedyogi_round_moves_by_server_step(scalar_spec, target_client):
    cfg = FLConfig(algorithm=Algorithm.FEDYOGI, num_clients=1, yogi=YogiConfig(server_lr=1.0))
    collection = fixed_collection({0: vec(1.0, 1.0)}, Algorithm.FEDYOGI)
    server, _, _ = await run_round(
        ServerState.initial(vec(0.0, 0.0), cfg.algorithm),
        [(ClientState.initial(0, 2), target_client(0.0))],
        cfg,
        scalar_spec,
        collection=collection,
    )
    np.testing.assert_allclose(server.global_params, [0.1 / 0.101] * 2)
    assert server.yogi_m is not None
    np.testing.assert_allclose(server.yogi_m, [0.1, 0.1])


def test_sampling():
    picked = sample_clients(5, 3, 10, 4)
    assert picked == sorted(picked) and len(set(picked)) == 4
    assert picked == sample_clients(5, 3, 10, 4)
    assert sample_clients(5, 3, 4, 4) == [0, 1, 2, 3]


def test_partial_participation_count():
    assert FLConfig(num_clients=10, participation=0.3).clients_per_round == 3
    assert FLConfig(num_clients=4, participation=0.3).clients_per_round == 2


def test_invalid_fl_config():
    with pytest.raises(ConfigError):
        FLConfig(rounds=0)
    with pytest.raises(ConfigError):
        FLConfig(participation=0.0)
    with pytest.raises(ConfigError):
        FLConfig(algorithm="fedfoo")


@pytest.fixture
def small_experiment():
    data_cfg = DataConfig(num_clients=3, train_per_client=40, test_per_client=20, input_dim=4, num_classes=3)
    model = ModelSpec(kind=ModelKind.MULTINOMIAL_LOGISTIC, input_dim=4, output_dim=3)
    return data_cfg, model


@pytest.mark.parametrize("algorithm", list(Algorithm))
def test_run_experiment(algorithm, small_experiment):
    data_cfg, model = small_experiment
    cfg = FLConfig(algorithm=algorithm, num_clients=3, rounds=3, master_seed=1)
    run_log = run_experiment(cfg, data_cfg, model)
    assert [log.round for log in run_log.rounds] == [0, 1, 2]
    assert len(run_log.initial) == 3
    assert len(run_log.rows()) == 9
    for log in run_log.rounds:
        assert np.isfinite(log.consistency)
        assert all(m.gsnr is not None and np.isfinite(m.gsnr) for m in log.clients)


def test_run_experiment_is_deterministic(small_experiment):
    data_cfg, model = small_experiment
    cfg = FLConfig(num_clients=3, rounds=2, master_seed=9)
    a = run_experiment(cfg, data_cfg, model)
    b = run_experiment(cfg, data_cfg, model, threads=3)
    assert a.rows() == b.rows()
    np.testing.assert_array_equal(a.final_params, b.final_params)
    assert a.stream_hash == b.stream_hash


def test_algorithms_share_data_and_batches(small_experiment):
    data_cfg, model = small_experiment
    logs = [
        run_experiment(FLConfig(algorithm=a, num_clients=3, rounds=2, master_seed=4), data_cfg, model)
        for a in (Algorithm.PFLALIGN, Algorithm.FEDAVG, Algorithm.SCAFFOLD)
    ]
    assert len({log.data_hash for log in logs}) == 1
    assert len({log.stream_hash for log in logs}) == 1


def test_offset_evaluation_mode(small_experiment):
    data_cfg, model = small_experiment
    cfg = FLConfig(num_clients=3, rounds=2, eval_mode=EvalMode.OFFSET)
    run_log = run_experiment(cfg, data_cfg, model)
    assert all(np.isfinite(m.test_loss) for m in run_log.final_clients().values())


def test_partial_participation_logs_sampled_clients(small_experiment):
    data_cfg, model = small_experiment
    cfg = FLConfig(num_clients=3, rounds=4, participation=0.5, algorithm=Algorithm.SCAFFOLD)
    run_log = run_experiment(cfg, data_cfg, model)
    assert all(len(log.clients) == 2 for log in run_log.rounds)
    assert all(sum(m.weight for m in log.clients) == pytest.approx(1.0) for log in run_log.rounds)


def test_fedavg_single_client_is_centralized_sgd():
    data_cfg = DataConfig(task=Task.REGRESSION, num_clients=1, train_per_client=30, test_per_client=5, input_dim=3)
    model = ModelSpec(kind=ModelKind.LINEAR_REGRESSION, input_dim=3, output_dim=1)
    cfg = FLConfig(algorithm=Algorithm.FEDAVG, num_clients=1, rounds=4, master_seed=2)
    run_log = run_experiment(cfg, data_cfg, model)

    data = build_datasets(data_cfg.with_seed(seeding.data_seed(2)))[0]
    w = init_params(model, np.random.default_rng(seeding.init_seed(2)))
    for r in range(cfg.rounds):
        w, _, _ = local_sgd(w, data, cfg.local, model, seeding.batch_seed(2, r, 0))
    np.testing.assert_array_equal(run_log.final_params, w)


def test_mismatched_client_counts(small_experiment):
    data_cfg, model = small_experiment
    with pytest.raises(ConfigError):
        run_experiment(FLConfig(num_clients=2), data_cfg, model)


def test_round_callback(small_experiment):
    data_cfg, model = small_experiment
    seen = []
    run_experiment(FLConfig(num_clients=3, rounds=2), data_cfg, model, round_callback=seen.append)
    assert [log.round for log in seen] == [0, 1]


async def test_round_evaluates_only_the_test_split(scalar_spec, target_client):
    cfg = FLConfig(algorithm=Algorithm.FEDAVG, num_clients=1)
    clients = [(ClientState.initial(0, 2), target_client(1.0))]
    with mock.patch("pflalign_sim.server.evaluate", wraps=evaluate) as spy:
        _, _, log = await run_round(ServerState.initial(vec(0.0, 0.0), cfg.algorithm), clients, cfg, scalar_spec)
    assert spy.call_count == 1
    assert spy.call_args.args[3] == "test"
    assert np.isfinite(log.clients[0].test_loss)


@pytest.mark.parametrize(
    "algorithm, expected",
    [
        (Algorithm.FEDPROX, {"prox_mu": 0.01}),
        (Algorithm.FEDAVG, {}),
        (Algorithm.FEDDYN, {"dyn_alpha": 0.01}),
    ],
)
def test_run_log_records_active_hyperparameters(algorithm, expected, small_experiment):
    data_cfg, model = small_experiment
    run_log = run_experiment(FLConfig(algorithm=algorithm, num_clients=3, rounds=1), data_cfg, model)
    assert run_log.hyperparameters == expected


def test_pflalign_hyperparameters_follow_local_config(small_experiment):
    data_cfg, model = small_experiment
    cfg = FLConfig(num_clients=3, rounds=1, local=LocalConfig(align_correction=False))
    run_log = run_experiment(cfg, data_cfg, model)
    assert run_log.hyperparameters["align_correction"] is False
    assert run_log.hyperparameters["personal_init"] is True
