"""Central finite-difference oracle for parameter and input gradients."""

from __future__ import annotations

import numpy as np

from .network import Network


def finite_difference_grads(net: Network, loss_fn, x, h: float = 1e-3, names=None):
    """Central differences ``(L(p+h) - L(p-h)) / 2h`` for every trainable entry.

    Independent of :meth:`Network.backward`: it only ever calls ``forward``.
    ``loss_fn(y) -> scalar``.  Returns ``(param_grads, input_grad)``.
    """
    x = np.array(x, dtype=np.float32)
    names = net.trainable_names() if names is None else names

    def loss_at() -> float:
        return float(loss_fn(net.forward_with_tape(x)[0]))

    grads = {}
    for name in names:
        p = net.parameter(name).data
        g = np.zeros(p.shape, dtype=np.float64)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_at()
            flat[i] = orig - h
            down = loss_at()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads[name] = g

    gx = np.zeros(x.shape, dtype=np.float64)
    xf, gxf = x.reshape(-1), gx.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        up = loss_at()
        xf[i] = orig - h
        down = loss_at()
        xf[i] = orig
        gxf[i] = (up - down) / (2 * h)
    return grads, gx


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest elementwise error, relative to the gradient's own scale."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(n).max(initial=0.0), np.abs(a).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)
