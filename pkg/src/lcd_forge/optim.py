"""Adam with bias correction and an exponential moving average of weights."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One Adam update, applied in place to ``params``."""
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise KeyError(f"adam_step: no gradient for parameter(s) {', '.join(missing)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ValueError(f"adam_step: moment buffer for {name} has shape {m.shape}, parameter has {p.data.shape}")
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)


def ema_update(params: Mapping[str, np.ndarray], shadow: Mapping[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    """Return ``decay * shadow + (1 - decay) * params`` per entry."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"ema_update: decay must lie in [0, 1), got {decay}")
    out = {}
    for name, p in params.items():
        p = p.data if isinstance(p, Tensor) else p
        s = shadow[name]
        if s.shape != p.shape:
            raise ValueError(f"ema_update: shadow {name} has shape {s.shape}, parameter has {p.shape}")
        out[name] = (decay * s + (1.0 - decay) * p).astype(s.dtype, copy=False)
    return out
