"""Layer kinds of the differentiable substrate.

Every layer works on batched float arrays (leading axis = batch) and exposes
``forward(x, params) -> (y, cache)`` and ``backward(dy, cache, params) ->
(dx, grads)``.  Parameters live outside the layer (in the owning network) so
a frozen network can share layer objects without any chance of mutation.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32

LAYER_KINDS = (
    "dense",
    "conv2d",
    "transpose-conv2d",
    "upsample-nearest",
    "relu",
    "leaky-relu",
    "tanh",
    "sigmoid",
    "batch-reshape",
)


class Layer:
    kind: str = ""

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def config(self) -> dict:
        return {}

    def forward(self, x, params):
        raise NotImplementedError

    def backward(self, dy, cache, params, want_grads=True, want_dx=True):
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.config()}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({args})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        self.in_features = int(in_features)
        self.out_features = int(out_features)

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def param_shapes(self):
        return {"weight": (self.in_features, self.out_features), "bias": (self.out_features,)}

    def init_params(self, rng):
        # He-uniform keeps relu stacks from collapsing at init
        bound = np.sqrt(6.0 / self.in_features)
        w = rng.uniform(-bound, bound, size=(self.in_features, self.out_features))
        return {"weight": w.astype(DTYPE), "bias": np.zeros(self.out_features, DTYPE)}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ValueError(f"dense expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x, params):
        return x @ params["weight"] + params["bias"], x

    def backward(self, dy, cache, params, want_grads=True, want_dx=True):
        x = cache
        grads = {"weight": x.T @ dy, "bias": dy.sum(axis=0)} if want_grads else {}
        return (dy @ params["weight"].T if want_dx else None), grads


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) padded input -> (B*ho*wo, C*k*k) patch matrix."""
    b, c = xp.shape[:2]
    cols = np.empty((b, ho, wo, c, k, k), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[..., i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(b * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patches into a padded (B, C, Hp, Wp) array."""
    b, c, hp, wp = shape
    cols = cols.reshape(b, ho, wo, c, k, k)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                ..., i, j
            ].transpose(0, 3, 1, 2)
    return out


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)

    def config(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
        }

    def param_shapes(self):
        k = self.kernel_size
        return {
            "weight": (self.out_channels, self.in_channels, k, k),
            "bias": (self.out_channels,),
        }

    def init_params(self, rng):
        fan_in = self.in_channels * self.kernel_size**2
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=self.param_shapes()["weight"])
        return {"weight": w.astype(DTYPE), "bias": np.zeros(self.out_channels, DTYPE)}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ValueError(f"conv2d expects ({self.in_channels}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = _conv_out(h, self.kernel_size, self.stride, self.padding)
        wo = _conv_out(w, self.kernel_size, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d collapses spatial size {h}x{w}")
        return (self.out_channels, ho, wo)

    def forward(self, x, params):
        b, _, h, w = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = _conv_out(h, k, s, p), _conv_out(w, k, s, p)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = _im2col(xp, k, s, ho, wo)
        wmat = params["weight"].reshape(self.out_channels, -1)
        y = cols @ wmat.T + params["bias"]
        y = y.reshape(b, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, xp.shape, ho, wo)

    def backward(self, dy, cache, params, want_grads=True, want_dx=True):
        cols, xp_shape, ho, wo = cache
        k, s, p = self.kernel_size, self.stride, self.padding
        dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        wmat = params["weight"].reshape(self.out_channels, -1)
        grads = {}
        if want_grads:
            grads = {
                "weight": (dy_mat.T @ cols).reshape(params["weight"].shape),
                "bias": dy_mat.sum(axis=0),
            }
        if not want_dx:
            return None, grads
        dxp = _col2im(dy_mat @ wmat, xp_shape, k, s, ho, wo)
        dx = dxp[:, :, p : xp_shape[2] - p, p : xp_shape[3] - p] if p else dxp
        return np.ascontiguousarray(dx), grads


class TransposeConv2d(Layer):
    """Fractionally strided convolution; exact adjoint of ``Conv2d`` w.r.t. its input."""

    kind = "transpose-conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=4, stride=2, padding=1):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)

    config = Conv2d.config

    def param_shapes(self):
        k = self.kernel_size
        return {
            "weight": (self.in_channels, self.out_channels, k, k),
            "bias": (self.out_channels,),
        }

    def init_params(self, rng):
        # effective fan-in per output pixel is in_channels * (k/stride)^2
        fan_in = self.in_channels * (self.kernel_size / self.stride) ** 2
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=self.param_shapes()["weight"])
        return {"weight": w.astype(DTYPE), "bias": np.zeros(self.out_channels, DTYPE)}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ValueError(
                f"transpose-conv2d expects ({self.in_channels}, H, W), got {tuple(in_shape)}"
            )
        _, h, w = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k)

    def forward(self, x, params):
        b, _, h, w = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        hp, wp = (h - 1) * s + k, (w - 1) * s + k
        x_mat = x.transpose(0, 2, 3, 1).reshape(-1, self.in_channels)
        cols = x_mat @ params["weight"].reshape(self.in_channels, -1)
        yp = _col2im(cols, (b, self.out_channels, hp, wp), k, s, h, w)
        y = yp[:, :, p : hp - p, p : wp - p] + params["bias"][None, :, None, None]
        return np.ascontiguousarray(y), (x_mat, h, w)

    def backward(self, dy, cache, params, want_grads=True, want_dx=True):
        x_mat, h, w = cache
        k, s, p = self.kernel_size, self.stride, self.padding
        dyp = np.pad(dy, ((0, 0), (0, 0), (p, p), (p, p))) if p else dy
        cols = _im2col(dyp, k, s, h, w)
        wmat = params["weight"].reshape(self.in_channels, -1)
        grads = {}
        if want_grads:
            grads = {
                "weight": (x_mat.T @ cols).reshape(params["weight"].shape),
                "bias": dy.sum(axis=(0, 2, 3)),
            }
        if not want_dx:
            return None, grads
        dx = (cols @ wmat.T).reshape(dy.shape[0], h, w, self.in_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), grads


class UpsampleNearest(Layer):
    kind = "upsample-nearest"

    def __init__(self, factor: int = 2):
        self.factor = int(factor)

    def config(self):
        return {"factor": self.factor}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h * self.factor, w * self.factor)

    def forward(self, x, params):
        f = self.factor
        return x.repeat(f, axis=2).repeat(f, axis=3), None

    def backward(self, dy, cache, params, want_grads=True, want_dx=True):
        f = self.factor
        b, c, h, w = dy.shape
        return dy.reshape(b, c, h // f, f, w // f, f).sum(axis=(3, 5)), {}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, params):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, params, want_grads=True, want_dx=True):
        return dy * cache, {}


class LeakyReLU(Layer):
    kind = "leaky-relu"

    def __init__(self, slope: float = 0.2):
        self.slope = float(slope)

    def config(self):
        return {"slope": self.slope}

    def forward(self, x, params):
        scale = np.where(x > 0, 1.0, self.slope).astype(x.dtype)
        return x * scale, scale

    def backward(self, dy, cache, params, want_grads=True, want_dx=True):
        return dy * cache, {}


class Tanh(Layer):
    """``offset + scale * tanh(x)``; scale=0.5, offset=0.5 maps onto (0, 1)."""

    kind = "tanh"

    def __init__(self, scale: float = 1.0, offset: float = 0.0):
        self.scale = float(scale)
        self.offset = float(offset)

    def config(self):
        return {"scale": self.scale, "offset": self.offset}

    def forward(self, x, params):
        t = np.tanh(x)
        return (self.offset + self.scale * t).astype(x.dtype), t

    def backward(self, dy, cache, params, want_grads=True, want_dx=True):
        return (dy * (self.scale * (1.0 - cache * cache))).astype(dy.dtype), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, params):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic
        return y.astype(x.dtype), y

    def backward(self, dy, cache, params, want_grads=True, want_dx=True):
        return (dy * cache * (1.0 - cache)).astype(dy.dtype), {}


class BatchReshape(Layer):
    """Reshape every sample, keeping the leading batch axis."""

    kind = "batch-reshape"

    def __init__(self, shape):
        self.shape = tuple(int(s) for s in shape)

    def config(self):
        return {"shape": list(self.shape)}

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ValueError(f"cannot reshape {tuple(in_shape)} to {self.shape}")
        return self.shape

    def forward(self, x, params):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, dy, cache, params, want_grads=True, want_dx=True):
        return dy.reshape(cache), {}


_REGISTRY = {
    cls.kind: cls
    for cls in (
        Dense,
        Conv2d,
        TransposeConv2d,
        UpsampleNearest,
        ReLU,
        LeakyReLU,
        Tanh,
        Sigmoid,
        BatchReshape,
    )
}


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _REGISTRY:
        raise ValueError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")
    return _REGISTRY[kind](**d)
