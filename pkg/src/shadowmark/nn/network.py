"""Sequential networks, reverse-mode gradients and parameter bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..digest import array_bytes, hexdigest
from ..errors import FrozenParameterError, NonFiniteError, ShapeError
from .layers import DTYPE, Layer, layer_from_dict


@dataclass
class Parameter:
    name: str
    data: np.ndarray
    trainable: bool = True

    @property
    def shape(self):
        return self.data.shape


class Network:
    """An ordered stack of layers with named parameters.

    Parameter names are ``"<layer index>.<kind>.<slot>"`` (e.g. ``"0.dense.weight"``),
    unique within the network by construction.
    """

    def __init__(
        self,
        layers: Sequence[Layer],
        input_shape: Sequence[int],
        seed: int | None = 0,
        params: dict[str, np.ndarray] | None = None,
    ):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))
            except ValueError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None

        rng = np.random.default_rng(seed)
        self._params: dict[str, Parameter] = {}
        for i, layer in enumerate(self.layers):
            init = layer.init_params(rng) if params is None else {}
            for slot, shape in layer.param_shapes().items():
                name = self.param_name(i, slot)
                if params is not None:
                    if name not in params:
                        raise ShapeError(f"missing parameter {name!r}")
                    data = np.array(params[name], dtype=DTYPE)
                else:
                    data = init[slot]
                if data.shape != tuple(shape):
                    raise ShapeError(f"parameter {name!r}: expected {tuple(shape)}, got {data.shape}")
                self._params[name] = Parameter(name, np.ascontiguousarray(data, DTYPE))

    def param_name(self, index: int, slot: str) -> str:
        return f"{index}.{self.layers[index].kind}.{slot}"

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def parameter(self, name: str) -> Parameter:
        return self._params[name]

    def trainable_names(self) -> list[str]:
        return [p.name for p in self._params.values() if p.trainable]

    @property
    def frozen(self) -> bool:
        return all(not p.trainable for p in self._params.values())

    def freeze(self) -> "Network":
        """Mark every parameter non-trainable and make its storage read-only."""
        for p in self._params.values():
            p.trainable = False
            p.data.flags.writeable = False
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            if not p.trainable:
                raise FrozenParameterError(f"parameter {name!r} is frozen")
            if state[name].shape != p.shape:
                raise ShapeError(f"parameter {name!r}: expected {p.shape}, got {state[name].shape}")
            p.data[...] = state[name]

    def digest(self) -> str:
        return hexdigest(array_bytes(p.data) for p in self._params.values())

    def spec(self) -> list[dict]:
        return [layer.to_dict() for layer in self.layers]

    @classmethod
    def from_spec(cls, spec: list[dict], input_shape, params=None, seed=0) -> "Network":
        return cls([layer_from_dict(d) for d in spec], input_shape, seed=seed, params=params)

    def __repr__(self):
        body = ", ".join(layer.kind for layer in self.layers)
        return f"Network({self.input_shape} -> {self.output_shape}: {body})"

    # -- evaluation -----------------------------------------------------------

    def _batched(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=DTYPE)
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] == self.input_shape and x.shape[0] >= 1:
            return x, False
        raise ShapeError(
            f"expected input shape {self.input_shape} (optionally batched), got {x.shape}"
        )

    def _layer_params(self, i: int) -> dict[str, np.ndarray]:
        layer = self.layers[i]
        return {slot: self._params[self.param_name(i, slot)].data for slot in layer.param_shapes()}

    def forward_with_tape(self, x) -> tuple[np.ndarray, list]:
        """Forward pass keeping per-layer caches for :meth:`backward`.

        Input may be a single sample or a batch; the output is always batched.
        """
        h, _ = self._batched(x)
        tape = []
        for i, layer in enumerate(self.layers):
            h, cache = layer.forward(h, self._layer_params(i))
            if not np.isfinite(h).all():
                raise NonFiniteError(f"non-finite activation at layer {i} ({layer.kind})")
            tape.append(cache)
        return h, tape

    def forward(self, x) -> np.ndarray:
        """Evaluate the network; an unbatched input yields an unbatched output."""
        _, single = self._batched(x)
        y, _ = self.forward_with_tape(x)
        return y[0] if single else y

    __call__ = forward

    def backward(
        self, tape: list, dy: np.ndarray, need_input_grad: bool = True
    ) -> tuple[np.ndarray | None, dict[str, np.ndarray]]:
        """Propagate ``dL/doutput`` back through the network.

        Returns the input gradient (``None`` when not requested) and gradients for
        trainable parameters only.
        """
        grads: dict[str, np.ndarray] = {}
        dy = np.asarray(dy, dtype=DTYPE)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            slots = layer.param_shapes()
            want_grads = any(self._params[self.param_name(i, s)].trainable for s in slots)
            want_dx = i > 0 or need_input_grad
            dy, layer_grads = layer.backward(
                dy, tape[i], self._layer_params(i), want_grads=want_grads, want_dx=want_dx
            )
            for slot, g in layer_grads.items():
                name = self.param_name(i, slot)
                if self._params[name].trainable:
                    grads[name] = g.astype(DTYPE, copy=False)
        return dy, grads


def forward(net: Network, x) -> np.ndarray:
    return net.forward(x)


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def check_loss(loss) -> float:
    arr = np.asarray(loss)
    if arr.ndim != 0 and arr.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {arr.shape}")
    value = float(arr.reshape(()))
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value}")
    return value


def compute_gradients(net: Network, loss_fn: LossFn, inputs) -> tuple[float, dict[str, np.ndarray]]:
    """Gradient of a scalar loss of the network output w.r.t. trainable parameters.

    ``loss_fn(output)`` returns ``(loss, dloss/doutput)``.  Returns the loss value
    and a ``name -> gradient`` map; frozen parameters have no entry.
    """
    y, tape = net.forward_with_tape(inputs)
    loss, dy = loss_fn(y)
    value = check_loss(loss)
    dy = np.asarray(dy, dtype=DTYPE)
    if dy.shape != y.shape:
        raise ShapeError(f"loss gradient shape {dy.shape} != output shape {y.shape}")
    _, grads = net.backward(tape, dy, need_input_grad=False)
    return value, grads


class Chain:
    """Composition ``nets[-1](...nets[1](nets[0](x)))`` with joint backprop."""

    def __init__(self, *nets: Network):
        for a, b in zip(nets, nets[1:]):
            if a.output_shape != b.input_shape:
                raise ShapeError(f"cannot chain {a.output_shape} into {b.input_shape}")
        self.nets = list(nets)

    def forward_with_tape(self, x):
        tapes = []
        for net in self.nets:
            x, tape = net.forward_with_tape(x)
            tapes.append(tape)
        return x, tapes

    def forward(self, x):
        for net in self.nets:
            x = net.forward(x)
        return x

    def backward(self, tapes, dy) -> list[dict[str, np.ndarray]]:
        """Per-network gradient maps, in chain order."""
        out: list[dict[str, np.ndarray]] = [{} for _ in self.nets]
        for i in range(len(self.nets) - 1, -1, -1):
            # input grad is needed only if some earlier net is trainable
            upstream = any(n.trainable_names() for n in self.nets[:i])
            dy, out[i] = self.nets[i].backward(tapes[i], dy, need_input_grad=upstream)
            if dy is None:
                break
        return out
