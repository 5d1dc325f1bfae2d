from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def adam_step(opt: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray] | None = None) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    opt.step_count += 1
    b1, b2 = opt.beta1, opt.beta2
    corr1 = 1.0 - b1 ** opt.step_count
    corr2 = 1.0 - b2 ** opt.step_count
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = opt.first_moment.get(name)
        if m is None:
            m = opt.first_moment[name] = np.zeros_like(p.data)
            opt.second_moment[name] = np.zeros_like(p.data)
        v = opt.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= opt.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + opt.epsilon)


class Adam:
    """Adam over a named parameter set, with global-norm clipping before each step."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, max_grad_norm: float | None = 1.0):
        self.params = params
        self.state = AdamState(lr, betas[0], betas[1], eps)
        self.max_grad_norm = max_grad_norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        norm = float("nan")
        if self.max_grad_norm is not None:
            norm = clip_grad_norm(self.params, self.max_grad_norm)
        adam_step(self.state, self.params)
        return norm
