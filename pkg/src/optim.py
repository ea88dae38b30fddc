"""
Adam optimizer.

``adam_step`` is the single-parameter update; ``Adam`` owns one
``AdamState`` per named parameter and applies the update to all of them.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numeric import Tensor

ADAM_EPS = 1e-8


@dataclass
class AdamState:
    """Moment estimates for one parameter."""

    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = ADAM_EPS
    step: int = 0

    @classmethod
    def for_param(cls, param: Tensor, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = ADAM_EPS):
        if lr <= 0 or not (0 < beta1 < 1) or not (0 < beta2 < 1) or eps <= 0:
            raise ValueError(f"invalid Adam hyper-parameters lr={lr} betas=({beta1}, {beta2}) eps={eps}")
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data), lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param: Tensor, state: AdamState) -> tuple[Tensor, AdamState]:
    """Bias-corrected Adam update of ``param`` in place. The caller clears grads."""
    if param.grad is None:
        raise ContractError(f"adam_step: parameter {param.name or param.shape} has no gradient")
    if state.m.shape != param.shape:
        raise ContractError(f"adam_step: state shape {state.m.shape} does not match parameter {param.shape}")
    g = param.grad
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param, state


@dataclass
class Adam:
    """Adam over a dict of named parameters."""

    params: dict[str, Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = ADAM_EPS
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.states[name] = AdamState.for_param(p, self.lr, self.beta1, self.beta2, self.eps)

    def step(self) -> int:
        """Update every parameter that received a gradient; returns how many did."""
        updated = 0
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p, self.states[name])
            updated += 1
        return updated

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
