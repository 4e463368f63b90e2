from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import NumericError, ShapeError, Tensor


@dataclass
class OptimizerState:
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState) -> OptimizerState:
    """One AdamW update in place on ``params`` (name -> Tensor).

    Weight decay is decoupled: applied to the parameter, not folded into the
    gradient moments.  Parameters absent from ``grads`` receive a zero
    gradient.
    """
    if state.lr <= 0:
        raise ValueError(f"adamw_step: learning rate must be positive, got {state.lr}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"adamw_step: gradient for unknown parameter {name!r}")
        if g is not None and g.shape != params[name].shape:
            raise ShapeError(f"adamw_step: gradient {g.shape} vs parameter {name} {params[name].shape}")
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"adamw_step: non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1 - state.lr * state.weight_decay
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return state


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values() if g is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale
    return total


class AdamW:
    """Thin stateful wrapper reading gradients off ``param.grad``."""

    def __init__(self, params: dict, lr=2e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, clip: float | None = None):
        self.params = params
        self.state = OptimizerState(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        self.clip = clip

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: p.grad for k, p in self.params.items()}
        if self.clip is not None:
            clip_grad_norm(grads, self.clip)
        adamw_step(self.params, grads, self.state)
