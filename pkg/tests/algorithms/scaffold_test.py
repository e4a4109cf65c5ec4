import numpy as np
import pytest

from pflalign_sim.algorithms import Algorithm, ClientState, LocalConfig, Scaffold, fedavg_local, scaffold_local
from pflalign_sim.errors import AlgorithmError
from pflalign_sim.server import FLConfig, ServerState, run_round


def test_zero_controls_single_step_is_sgd(scalar_spec, target_client):
    cfg = LocalConfig(local_steps=1)
    data = target_client(2.0)
    w = np.array([0.3, -0.4])
    state = ClientState.initial(0, 2, with_control=True)
    result = scaffold_local(w, np.zeros(2), state, data, cfg, scalar_spec, 4)
    np.testing.assert_array_equal(result.params, fedavg_local(w, data, cfg, scalar_spec, 4))


def test_no_gradient_equal_controls(scalar_spec, target_client):
    c = np.array([0.2, -0.1])
    w = np.array([0.0, 1.0])
    state = ClientState.initial(0, 2).replace(control=c)
    result = scaffold_local(w, c, state, target_client(1.0), LocalConfig(), scalar_spec, 0)
    np.testing.assert_array_equal(result.params, w)
    assert result.state.control is not None and result.control_delta is not None
    np.testing.assert_array_equal(result.state.control, [0.0, 0.0])
    np.testing.assert_array_equal(result.control_delta, -c)


def test_control_update(scalar_spec, target_client):
    cfg = LocalConfig(local_steps=3, lr=0.1)
    w = np.array([0.0, 0.0])
    c_global = np.array([0.0, 0.5])
    state = ClientState.initial(0, 2, with_control=True)
    result = scaffold_local(w, c_global, state, target_client(1.0), cfg, scalar_spec, 0)
    expected = -c_global + (w - result.params) / (3 * 0.1)
    np.testing.assert_allclose(result.state.control, expected)


def test_needs_server_control(scalar_spec, target_client):
    with pytest.raises(AlgorithmError):
        Scaffold()(
            state=ClientState.initial(0, 2, with_control=True),
            global_params=np.zeros(2),
            data=target_client(1.0),
            cfg=LocalConfig(),
            model=scalar_spec,
            batch_seed=0,
        )


async def test_single_client_converges_to_local_optimum(scalar_spec, target_client):
    a = 1.7
    cfg = FLConfig(algorithm=Algorithm.SCAFFOLD, num_clients=1, rounds=30, local=LocalConfig(lr=0.1))
    server = ServerState.initial(np.array([0.0, -2.0]), cfg.algorithm)
    states = [ClientState.initial(0, 2, with_control=True)]
    data = target_client(a)
    for _ in range(cfg.rounds):
        server, states, _ = await run_round(server, [(states[0], data)], cfg, scalar_spec)
    assert server.global_params[1] == pytest.approx(a, abs=1e-10)
    assert server.scaffold_c is not None
    np.testing.assert_allclose(server.scaffold_c, states[0].control, atol=1e-12)
