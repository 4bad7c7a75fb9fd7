import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from domain.exceptions import DimensionError
from domain.optimizer import OptimState, centralize, clip_by_global_norm, lr_effective, sgd_step


def _params():
    return {"1.weight": np.ones((2, 3)), "1.bias": np.zeros(2)}


def test_centralize_zeroes_row_means(np_rng):
    g = np_rng.normal(size=(4, 3, 3, 3))
    out = centralize(g)
    assert_allclose(out.mean(axis=(1, 2, 3)), 0.0, atol=1e-12)
    assert_array_equal(centralize(np.array([1.0, 2.0])), [1.0, 2.0])


def test_clip_bounds_global_norm(np_rng):
    grads = [np_rng.normal(size=(3, 3)) * 10, np_rng.normal(size=4) * 10]
    clipped = clip_by_global_norm(grads, 1.0)
    total = np.sqrt(sum(np.sum(g ** 2) for g in clipped))
    assert total == pytest.approx(1.0)
    small = [np.full(2, 0.1)]
    assert clip_by_global_norm(small, 1.0) is small


def test_warmup_is_linear():
    state = OptimState(lr_forward=0.2, lr_feedback=0.1, warmup_steps=200)
    assert lr_effective(state, "forward", 50) == pytest.approx(0.05)
    assert lr_effective(state, "feedback", 100) == pytest.approx(0.05)
    assert lr_effective(state, "forward", 1000) == pytest.approx(0.2)
    assert lr_effective(OptimState(lr_forward=0.3, warmup_steps=0), "forward", 1) == 0.3


def test_zero_lr_is_a_no_op():
    state = OptimState(lr_forward=0.0, momentum=0.9, clip_norm=1.0)
    state.advance()
    params = _params()
    before = {k: v.copy() for k, v in params.items()}
    sgd_step(state, params, {"1.weight": np.full((2, 3), 5.0), "1.bias": np.ones(2)}, "forward")
    for k in params:
        assert_array_equal(params[k], before[k])


def test_plain_sgd_step():
    state = OptimState(lr_forward=0.1, warmup_steps=0, centralize=False)
    state.advance()
    params = _params()
    sgd_step(state, params, {"1.weight": np.ones((2, 3)), "1.bias": np.full(2, 2.0)}, "forward")
    assert_allclose(params["1.weight"], 0.9)
    assert_allclose(params["1.bias"], -0.2)


def test_momentum_accumulates():
    state = OptimState(lr_forward=1.0, momentum=0.5, warmup_steps=0, centralize=False)
    params = {"1.bias": np.zeros(1)}
    for _ in range(2):
        state.advance()
        sgd_step(state, params, {"1.bias": np.ones(1)}, "forward")
    # velocities 1 then 1.5
    assert_allclose(params["1.bias"], -2.5)


def test_networks_keep_separate_velocity():
    state = OptimState(lr_forward=1.0, lr_feedback=1.0, momentum=0.5, warmup_steps=0, centralize=False)
    state.advance()
    sgd_step(state, {"1.bias": np.zeros(1)}, {"1.bias": np.ones(1)}, "forward")
    assert "1.bias" not in state.velocity["feedback"]


def test_key_and_shape_checks():
    state = OptimState(lr_forward=0.1)
    with pytest.raises(DimensionError):
        sgd_step(state, _params(), {"1.weight": np.ones((2, 3))}, "forward")
    with pytest.raises(DimensionError):
        sgd_step(state, _params(), {"1.weight": np.ones((3, 2)), "1.bias": np.zeros(2)}, "forward")
    with pytest.raises(ValueError):
        sgd_step(state, _params(), {}, "sideways")


def test_invalid_hyperparameters():
    with pytest.raises(ValueError):
        OptimState(lr_forward=-1.0)
    with pytest.raises(ValueError):
        OptimState(lr_forward=0.1, momentum=1.0)
    with pytest.raises(ValueError):
        OptimState(lr_forward=0.1, clip_norm=0.0)
