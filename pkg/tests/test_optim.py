"""Optimizer recurrences, refusal semantics, and grad_check contracts."""

import numpy as np
import pytest

from ditr import autodiff as ad
from ditr.layers import Parameter
from ditr.optim import GradientError, OptimState, clip_gradients, grad_check, sgd_step


def _param(values):
    return Parameter("p", np.asarray(values, np.float32))


def test_plain_gradient_descent_when_momentum_zero():
    p = _param([1.0, -2.0])
    g = np.array([0.5, 0.25], np.float32)
    p.tensor.grad = g.copy()
    sgd_step([p], OptimState(lr=0.1, momentum=0.0, weight_decay=0.0))
    np.testing.assert_allclose(p.value, np.array([1.0, -2.0]) - 0.1 * g, rtol=1e-6)


def test_two_steps_same_gradient_displacement():
    p = _param([1.0, 2.0])
    start = p.value.copy()
    g = np.array([0.5, -0.25], np.float32)
    state = OptimState(lr=0.1, momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        p.tensor.grad = g.copy()
        sgd_step([p], state)
    # v1 = g, v2 = 0.9 g + g => total displacement lr (1 + 1.9) g
    np.testing.assert_allclose(start - p.value, 0.1 * 2.9 * g, rtol=1e-5)


def test_weight_decay_shrinks_params_without_gradient():
    p = _param([1.0, -3.0])
    state = OptimState(lr=0.5, momentum=0.0, weight_decay=1e-4)
    expect = p.value.copy()
    for _ in range(3):
        p.tensor.grad = np.zeros(2, np.float32)
        sgd_step([p], state)
        expect = expect * (1 - 0.5 * 1e-4)
    np.testing.assert_allclose(p.value, expect, rtol=1e-6)


def test_nan_gradient_refused_with_diagnostic():
    p = _param([1.0])
    p.tensor.grad = np.array([np.nan], np.float32)
    before = p.value.copy()
    with pytest.raises(GradientError, match="'p'"):
        sgd_step([p], OptimState(lr=0.1))
    np.testing.assert_array_equal(p.value, before)


def test_missing_gradient_refused():
    p = _param([1.0])
    with pytest.raises(GradientError, match="no gradient"):
        sgd_step([p], OptimState(lr=0.1))


def test_optim_state_validates_ranges():
    with pytest.raises(ValueError):
        OptimState(lr=0.0)
    with pytest.raises(ValueError):
        OptimState(lr=0.1, momentum=1.0)
    with pytest.raises(ValueError):
        OptimState(lr=0.1, weight_decay=-1e-3)


def test_clip_gradients_scales_to_max_norm():
    p = _param([3.0, 4.0])
    p.tensor.grad = np.array([3.0, 4.0], np.float32)
    norm = clip_gradients([p], 1.0)
    assert abs(norm - 5.0) < 1e-6
    assert abs(float(np.linalg.norm(p.grad)) - 1.0) < 1e-6


def test_grad_check_linear_map_is_exact_at_f64():
    rng = np.random.default_rng(3)
    w = ad.tensor(rng.standard_normal((4, 5)), True, np.float64)
    x = rng.standard_normal((2, 4))
    err = grad_check(lambda: ad.sum_(ad.matmul(ad.tensor(x, dtype=np.float64), w)), [w])
    assert err < 1e-6


def test_grad_check_validates_epsilon():
    w = ad.tensor(np.ones((2, 2)), True, np.float64)
    with pytest.raises(ValueError):
        grad_check(lambda: ad.sum_(w), [w], eps=0.5)
