import numpy as np
import pytest
from scipy import stats

from pflalign_sim.analysis.metrics import (
    GSNR_CAP,
    aggregation_consistency,
    gsnr,
    student_t_interval,
)
from pflalign_sim.errors import InvalidArgumentError, ShapeMismatchError, SimulationError


def test_gsnr_two_step_window():
    assert gsnr(np.array([[0.9], [1.1]])) == pytest.approx(100.0, rel=1e-9)


def test_gsnr_averages_coordinates():
    grads = np.array([[0.9, 0.0], [1.1, 0.0]])
    assert gsnr(grads) == pytest.approx(50.0, rel=1e-9)


def test_gsnr_constant_gradients_hit_the_cap():
    assert gsnr(np.full((4, 3), 2.0)) == GSNR_CAP
    assert gsnr(np.ones((4, 3)), cap=10.0) == 10.0


def test_gsnr_zero_gradients():
    assert gsnr(np.zeros((3, 2))) == 0.0


@pytest.mark.parametrize("grads", [np.ones((1, 3)), np.ones(3), np.ones((2, 2, 2))])
def test_gsnr_rejects_bad_windows(grads):
    with pytest.raises(ShapeMismatchError):
        gsnr(grads)


def test_consistency_single_client():
    assert aggregation_consistency([np.array([3.0, 4.0])], [7]) == 5.0


def test_consistency_is_size_weighted():
    params = [np.array([3.0, 4.0]), np.zeros(2)]
    assert aggregation_consistency(params, [1, 1]) == 2.5
    assert aggregation_consistency(params, [3, 1]) == 3.75


def test_consistency_mismatched_sizes():
    with pytest.raises(ShapeMismatchError):
        aggregation_consistency([np.zeros(2)], [1, 2])
    with pytest.raises(ShapeMismatchError):
        aggregation_consistency([], [])


@pytest.mark.parametrize("sizes", [[-1, 2], [0, 0]])
def test_consistency_rejects_bad_sizes(sizes):
    with pytest.raises(InvalidArgumentError) as e:
        aggregation_consistency([np.zeros(2), np.ones(2)], sizes)
    assert isinstance(e.value, SimulationError)


def test_student_t_interval():
    mean, half_width = student_t_interval([1.0, 2.0, 3.0])
    assert mean == 2.0
    assert half_width == pytest.approx(stats.t.ppf(0.975, df=2) / np.sqrt(3))


def test_student_t_interval_single_seed_is_undefined():
    assert student_t_interval([0.25]) == (0.25, None)


def test_student_t_interval_identical_values():
    assert student_t_interval([0.5, 0.5, 0.5]) == (0.5, 0.0)
