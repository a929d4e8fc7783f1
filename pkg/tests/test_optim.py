import numpy as np
import pytest

from safeadapt import networks as nets
from safeadapt.optim import OptimizerState, adam_step


def scalar_adam_reference(grad_fn, theta0, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Independent scalar implementation, written out from the update formulas."""
    theta, m, v = theta0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta


def _params(n=4, seed=0):
    spec = nets.MlpSpec(n, (), 1)
    return nets.init_params(spec, np.random.default_rng(seed))


def test_zero_gradient_leaves_theta_unchanged():
    params = _params()
    before = params.theta.copy()
    state = OptimizerState.for_params(params)
    adam_step(state, params, np.zeros_like(params.theta))
    assert np.array_equal(params.theta, before)
    assert state.step_count == 1


def test_first_step_moves_against_gradient_sign():
    params = _params(seed=3)
    state = OptimizerState.for_params(params, learning_rate=1e-3)
    grad = np.random.default_rng(1).normal(size=params.theta.shape)
    before = params.theta.copy()
    adam_step(state, params, grad)
    moved = params.theta - before
    nz = grad != 0
    assert np.all(np.sign(moved[nz]) == -np.sign(grad[nz]))


def test_converges_to_quadratic_minimum_and_matches_reference():
    # f(theta) = (theta - 3)^2 from 0, lr = 0.05, 1000 steps
    spec = nets.MlpSpec(1, (), 1)
    params = nets.NetworkParams(spec, np.zeros(2))
    state = OptimizerState.for_params(params, learning_rate=0.05)
    for _ in range(1000):
        g = np.array([2.0 * (params.theta[0] - 3.0), 0.0])
        adam_step(state, params, g)
    assert abs(params.theta[0] - 3.0) < 0.05
    ref = scalar_adam_reference(lambda th: 2.0 * (th - 3.0), 0.0, 0.05, 1000)
    assert params.theta[0] == pytest.approx(ref, abs=1e-12)


def test_nonfinite_gradient_rejected():
    params = _params()
    state = OptimizerState.for_params(params)
    with pytest.raises(FloatingPointError):
        adam_step(state, params, np.full_like(params.theta, np.inf))


def test_length_mismatch_rejected():
    params = _params()
    state = OptimizerState.for_params(params)
    with pytest.raises(ValueError):
        adam_step(state, params, np.zeros(params.theta.size + 1))


def test_trajectory_determinism():
    outs = []
    for _ in range(2):
        params = _params(seed=11)
        state = OptimizerState.for_params(params, learning_rate=1e-2)
        rng = np.random.default_rng(5)
        for _ in range(50):
            adam_step(state, params, rng.normal(size=params.theta.shape))
        outs.append(params.theta.copy())
    assert np.array_equal(outs[0], outs[1])
