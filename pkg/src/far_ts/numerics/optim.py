"""Adam with bias correction, plus global-norm gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, NumericError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8) -> "AdamState":
        return cls(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                   first_moment=[np.zeros_like(p.data) for p in params],
                   second_moment=[np.zeros_like(p.data) for p in params])

    def reset_rows(self, index: int, rows) -> None:
        """Forget the moments of selected rows of parameter ``index``."""
        self.first_moment[index][rows] = 0
        self.second_moment[index][rows] = 0


def adam_update(params, grads, state: AdamState) -> None:
    """One bias-corrected Adam step, applied to ``params`` in place.

    ``grads`` entries may be None for parameters that received no gradient.
    """
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise DimensionError("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.first_moment):
        if m.shape != p.data.shape or (g is not None and np.shape(g) != p.data.shape):
            raise DimensionError(f"shape mismatch for parameter of shape {p.data.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= scale
    return total


class Adam:
    """Thin convenience wrapper reading ``.grad`` off each parameter."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, betas=betas, eps=eps)
        self.clip_norm = clip_norm

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad for p in self.params]
        if self.clip_norm is not None:
            clip_grad_norm(grads, self.clip_norm)
        adam_update(self.params, grads, self.state)
