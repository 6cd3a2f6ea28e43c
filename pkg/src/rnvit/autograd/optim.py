"""Adam with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One in-place bias-corrected update of every array in ``params``.

    ``params`` maps names to Tensors (or arrays); ``grads`` maps the same names
    to gradient arrays. Missing or ``None`` gradients count as zero.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in params:
        p = params[name]
        w = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            w -= state.lr * state.weight_decay * w
        w -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def collect_grads(params: dict) -> dict:
    return {k: t.grad for k, t in params.items()}


def zero_grads(params: dict) -> None:
    for t in params.values():
        t.grad = None
