import numpy as np
import pytest

from pflalign_sim.algorithms import (
    ClientState,
    FedAvg,
    FedProx,
    FedSAM,
    FedYogi,
    LocalConfig,
    fedavg_local,
    fedprox_local,
    fedsam_local,
)
from pflalign_sim.errors import AlgorithmError


def test_fedavg_contracts_towards_target(scalar_spec, target_client):
    a, b0, lr, steps = 2.0, -1.0, 0.1, 7
    cfg = LocalConfig(local_steps=steps, lr=lr)
    out = fedavg_local(np.array([0.3, b0]), target_client(a), cfg, scalar_spec, 0)
    assert out[0] == 0.3
    assert out[1] == pytest.approx(a + (1 - 2 * lr) ** steps * (b0 - a), rel=1e-12)


def test_fedavg_at_optimum_does_not_move(scalar_spec, target_client):
    w = np.array([0.5, 1.5])
    out = fedavg_local(w, target_client(1.5), LocalConfig(), scalar_spec, 0)
    np.testing.assert_array_equal(out, w)


def test_fedavg_deterministic(scalar_spec, target_client):
    data = target_client(1.0)
    w = np.array([0.1, 0.2])
    np.testing.assert_array_equal(
        fedavg_local(w, data, LocalConfig(), scalar_spec, 5),
        fedavg_local(w, data, LocalConfig(), scalar_spec, 5),
    )


def test_fedprox_zero_mu_is_fedavg(scalar_spec, target_client):
    data = target_client(3.0)
    w = np.array([0.1, 0.2])
    cfg = LocalConfig(prox_mu=0.0)
    np.testing.assert_array_equal(
        fedprox_local(w, data, cfg, scalar_spec, 5), fedavg_local(w, data, cfg, scalar_spec, 5)
    )


def test_fedprox_fixed_point(scalar_spec, target_client):
    a, b_global, mu = 3.0, -1.0, 1.0
    cfg = LocalConfig(local_steps=2000, lr=0.05, prox_mu=mu)
    out = fedprox_local(np.array([0.0, b_global]), target_client(a), cfg, scalar_spec, 0)
    # stationarity of (b - a)^2 + (mu / 2)(b - b_global)^2
    assert out[1] == pytest.approx((2 * a + mu * b_global) / (2 + mu), abs=1e-10)


def test_fedprox_stays_at_global_without_data_gradient(scalar_spec, target_client):
    w = np.array([0.4, 2.0])
    out = fedprox_local(w, target_client(2.0), LocalConfig(prox_mu=0.5), scalar_spec, 1)
    np.testing.assert_array_equal(out, w)


def test_fedsam_zero_rho_is_fedavg(scalar_spec, target_client):
    data = target_client(-2.0)
    w = np.array([0.1, 0.2])
    cfg = LocalConfig(sam_rho=0.0)
    np.testing.assert_array_equal(
        fedsam_local(w, data, cfg, scalar_spec, 2), fedavg_local(w, data, cfg, scalar_spec, 2)
    )


def test_fedsam_single_step(scalar_spec, target_client):
    rho, lr = 0.05, 0.04
    cfg = LocalConfig(local_steps=1, lr=lr, sam_rho=rho)
    out = fedsam_local(np.array([0.0, 1.0]), target_client(0.0), cfg, scalar_spec, 0)
    # gradient taken at b + rho sign(b): 2 (1 + rho)
    assert out[1] == pytest.approx(1.0 - lr * 2 * (1.0 + rho))


def test_fedsam_no_gradient_no_movement(scalar_spec, target_client):
    w = np.array([0.0, 0.7])
    out = fedsam_local(w, target_client(0.7), LocalConfig(sam_rho=0.1), scalar_spec, 0)
    np.testing.assert_array_equal(out, w)


@pytest.mark.parametrize("algorithm", [FedAvg(), FedProx(), FedSAM(), FedYogi()])
def test_local_result(algorithm, scalar_spec, target_client):
    w = np.array([0.0, 0.0])
    result = algorithm(
        state=ClientState.initial(0, 2),
        global_params=w,
        data=target_client(1.0),
        cfg=LocalConfig(),
        model=scalar_spec,
        batch_seed=3,
    )
    np.testing.assert_allclose(result.state.delta, result.params - w)
    assert result.trace.steps == 5
    assert result.batch_indices.shape == (5, 4)
    assert result.train_loss > 0


def test_to_params():
    assert FedProx().to_params() == {"name": "fedprox", "hyperparameters": ["prox_mu"]}
    assert FedYogi().to_params()["name"] == "fedyogi"


def test_invalid_local_config():
    with pytest.raises(AlgorithmError):
        LocalConfig(local_steps=0)
    with pytest.raises(AlgorithmError):
        LocalConfig(beta=1.0)
    with pytest.raises(AlgorithmError):
        LocalConfig(prox_mu=-1.0)
