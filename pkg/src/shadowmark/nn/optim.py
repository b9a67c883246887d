"""Adaptive-moment (Adam) parameter updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from .layers import DTYPE
from .network import Parameter


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def apply_update(params: list[Parameter], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One Adam step on every trainable parameter, in place.

    Frozen parameters are skipped without being touched.  Every trainable
    parameter must have a gradient.
    """
    trainable = [p for p in params if p.trainable]
    missing = [p.name for p in trainable if p.name not in grads]
    if missing:
        raise KeyError(f"missing gradients for trainable parameters: {missing}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p in trainable:
        g = np.asarray(grads[p.name], dtype=DTYPE)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {p.name!r}: expected {p.shape}, got {g.shape}")
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.data -= step.astype(DTYPE)
    return state


class Adam:
    """Small convenience wrapper binding a parameter list to an :class:`AdamState`."""

    def __init__(self, params: list[Parameter], lr: float = 2e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        apply_update(self.params, grads, self.state)
