"""First-order stochastic optimizer with moment accumulators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .networks import NetworkParams


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    @classmethod
    def for_params(cls, params: NetworkParams, **kwargs) -> "OptimizerState":
        state = cls(**kwargs)
        state.m = np.zeros_like(params.theta)
        state.v = np.zeros_like(params.theta)
        return state


def adam_step(state: OptimizerState, params: NetworkParams, grad: np.ndarray):
    """One bias-corrected moment update; mutates params and state in place.

    Weight decay is decoupled (applied directly to the parameters, not
    through the gradient moments).
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.theta.shape:
        raise ValueError("gradient length does not match parameters")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    if state.m is None or state.m.shape != params.theta.shape:
        raise ValueError("optimizer state does not match parameters")
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    if state.weight_decay:
        params.theta *= 1.0 - state.learning_rate * state.weight_decay
    params.theta -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state
