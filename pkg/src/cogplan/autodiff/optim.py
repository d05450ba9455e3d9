"""Adam with decoupled weight decay, plus a literal SGD mode."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ConfigError, UsageError
from .nn import Parameter


@dataclass
class OptimizerState:
    learning_rate: float
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    mode: str = "adam"
    step_count: int = 0
    first_moment: dict[int, np.ndarray] = field(default_factory=dict)
    second_moment: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be non-negative, got {self.weight_decay}")
        if self.mode not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer mode {self.mode!r}")


def optimizer_step(state: OptimizerState, params: list[Parameter]) -> None:
    """Update every non-frozen parameter in place, then clear all gradients.

    Frozen parameters are skipped outright, so their bytes never change and
    no moment buffers are allocated for them.
    """
    live = [p for p in params if not p.frozen]
    for p in live:
        if p.grad is None:
            raise UsageError(f"parameter {p.name or '<unnamed>'} has no gradient")
    state.step_count += 1
    t = state.step_count
    lr, wd = state.learning_rate, state.weight_decay
    b1, b2 = state.betas
    for p in live:
        g = p.grad
        if state.mode == "sgd":
            p.data -= lr * (g + wd * p.data) if wd else lr * g
            continue
        key = id(p)
        m = state.first_moment.get(key)
        if m is None:
            m = state.first_moment[key] = np.zeros_like(p.data)
            state.second_moment[key] = np.zeros_like(p.data)
        v = state.second_moment[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + wd * p.data)
    for p in params:
        p.grad = None


class Adam:
    """Thin stateful wrapper: ``Adam(params, lr).step()`` after ``backward``."""

    def __init__(self, params: list[Parameter], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, mode: str = "adam"):
        self.params = list(params)
        self.state = OptimizerState(lr, weight_decay, betas, eps, mode)

    def step(self) -> None:
        optimizer_step(self.state, self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
