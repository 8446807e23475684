"""Adam optimiser with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ParameterError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")
        if self.step < 0:
            raise ParameterError("step must be >= 0")
        if self.first_moment.shape != self.second_moment.shape:
            raise DimensionError("moment shapes differ")

    @classmethod
    def for_parameter(cls, param: Tensor, learning_rate: float = 1e-3, **kwargs) -> "AdamState":
        zeros = np.zeros_like(param.data)
        return cls(zeros, zeros.copy(), learning_rate=learning_rate, **kwargs)


def adam_step(param: Tensor, grad: np.ndarray, state: AdamState) -> tuple[Tensor, AdamState]:
    """Apply one Adam update to ``param`` in place and advance ``state``."""
    grad = np.asarray(grad)
    if grad.shape != param.shape or state.first_moment.shape != param.shape:
        raise DimensionError(
            f"adam_step: param {param.shape}, grad {grad.shape}, state {state.first_moment.shape} must agree")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.first_moment *= b1
    state.first_moment += (1.0 - b1) * grad
    state.second_moment *= b2
    state.second_moment += (1.0 - b2) * (grad * grad)
    m_hat = state.first_moment / (1.0 - b1 ** state.step)
    v_hat = state.second_moment / (1.0 - b2 ** state.step)
    update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    param.data -= update.astype(param.dtype, copy=False)
    return param, state


@dataclass
class Adam:
    """Adam over a named parameter set; ``learning_rate`` can be changed between steps."""

    params: Mapping[str, Tensor]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.states[name] = AdamState.for_parameter(
                p, self.learning_rate, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, learning_rate: float | None = None) -> None:
        for name, p in self.params.items():
            state = self.states[name]
            if learning_rate is not None:
                state.learning_rate = learning_rate
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p, grad, state)
