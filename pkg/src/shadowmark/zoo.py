"""Network roles (key encoder, decoder, protected model, surrogate), pretraining
and checkpoint I/O."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as forge
from .digest import array_bytes, hexdigest
from .errors import CorruptionError, FrozenParameterError, PretrainingError, ShapeError
from .nn import (
    Adam,
    BatchReshape,
    Conv2d,
    Dense,
    LeakyReLU,
    Network,
    ReLU,
    Sigmoid,
    Tanh,
    TransposeConv2d,
)

log = logging.getLogger(__name__)

ROLES = ("key-encoder", "decoder", "protected", "surrogate")
IMAGE_SHAPE = (1, 32, 32)
KEY_DIM = 256
ENCODER_HIDDEN = 2048
# held-out error a pretrained victim must reach: per-pixel MSE for I2I,
# multi-bandwidth MMD^2 to fresh synthetic shapes for the generators
TASK_CEILING = {"I2I": 0.01, "N2I": 0.15, "NT2I": 0.3}

_ARCH_NAMES = {
    ("key-encoder", "I2I"): "Dense-TConv",
    ("key-encoder", "N2I"): "MLP",
    ("key-encoder", "NT2I"): "MLP",
    ("decoder", "I2I"): "ConvAE",
    ("decoder", "N2I"): "ConvAE-Dense",
    ("decoder", "NT2I"): "ConvAE-Dense",
    ("protected", "I2I"): "CNN-16",
    ("protected", "N2I"): "Gen-32",
    ("protected", "NT2I"): "CGen-32",
    ("surrogate", "I2I"): "CNN-8",
    ("surrogate", "N2I"): "Gen-16",
    ("surrogate", "NT2I"): "CGen-16",
}


def arch_name(role: str, modality: str) -> str:
    """Short label of the built-in architecture, for result tables."""
    return _ARCH_NAMES[(role, modality)]


def model_input_shape(modality: str, image_shape=IMAGE_SHAPE) -> tuple[int, ...]:
    if modality == "I2I":
        return tuple(image_shape)
    if modality == "N2I":
        return (forge.NOISE_DIM,)
    if modality == "NT2I":
        return (forge.NOISE_DIM + forge.N_CLASSES,)
    raise ValueError(f"unsupported modality {modality!r}")


def _generator_layers(in_dim, image_shape, base_channels):
    c, h, w = image_shape
    if h % 4 or w % 4:
        raise ShapeError(f"image sides must be multiples of 4, got {image_shape}")
    return [
        Dense(in_dim, base_channels * (h // 4) * (w // 4)),
        ReLU(),
        BatchReshape((base_channels, h // 4, w // 4)),
        TransposeConv2d(base_channels, base_channels // 2, 4, 2, 1),
        ReLU(),
        TransposeConv2d(base_channels // 2, c, 4, 2, 1),
        Sigmoid(),
    ]


def _layers_for(role, modality, key_dim, image_shape):
    c, h, w = image_shape
    x_shape = model_input_shape(modality, image_shape)
    if role == "key-encoder":
        if modality == "I2I":
            if h % 4 or w % 4:
                raise ShapeError(f"image sides must be multiples of 4, got {image_shape}")
            ch = max(1, ENCODER_HIDDEN // ((h // 4) * (w // 4)))
            layers = [
                Dense(key_dim, ch * (h // 4) * (w // 4)),
                LeakyReLU(0.2),
                BatchReshape((ch, h // 4, w // 4)),
                TransposeConv2d(ch, 16, 4, 2, 1),
                LeakyReLU(0.2),
                TransposeConv2d(16, c, 4, 2, 1),
                Tanh(0.5, 0.5),
            ]
        else:
            # MLP; tanh keeps encoded keys within a few sigmas of the noise prior
            layers = [Dense(key_dim, 256), LeakyReLU(0.2), Dense(256, x_shape[0]), Tanh(3.0, 0.0)]
        return layers, (key_dim,)
    if role == "decoder" and modality != "I2I":
        # generated images share no pixel layout with the mark; the dense
        # bottleneck lets D place mark pixels from global features
        fh, fw = h // 4, w // 4
        layers = [
            Conv2d(c, 16, 3, 2, 1),
            LeakyReLU(0.2),
            Conv2d(16, 32, 3, 2, 1),
            LeakyReLU(0.2),
            BatchReshape((32 * fh * fw,)),
            Dense(32 * fh * fw, 128),
            LeakyReLU(0.2),
            Dense(128, 32 * fh * fw),
            LeakyReLU(0.2),
            BatchReshape((32, fh, fw)),
            TransposeConv2d(32, 16, 4, 2, 1),
            LeakyReLU(0.2),
            TransposeConv2d(16, c, 4, 2, 1),
            Tanh(2.0, -0.5),
        ]
        return layers, tuple(image_shape)
    if role == "decoder":
        layers = [
            Conv2d(c, 16, 3, 1, 1),
            ReLU(),
            Conv2d(16, 32, 3, 2, 1),
            ReLU(),
            Conv2d(32, 32, 3, 2, 1),
            ReLU(),
            TransposeConv2d(32, 16, 4, 2, 1),
            ReLU(),
            TransposeConv2d(16, c, 4, 2, 1),
            Tanh(2.0, -0.5),
        ]
        return layers, tuple(image_shape)
    if role in ("protected", "surrogate"):
        width = 16 if role == "protected" else 8
        if modality == "I2I":
            layers = [
                Conv2d(c, width, 3, 1, 1),
                ReLU(),
                Conv2d(width, width, 3, 1, 1),
                ReLU(),
                Conv2d(width, c, 3, 1, 1),
            ]
        else:
            layers = _generator_layers(x_shape[0], image_shape, 2 * width)
        return layers, x_shape
    raise ValueError(f"unsupported role {role!r}; expected one of {ROLES}")


def build_network(role: str, modality: str, key_dim: int | None = KEY_DIM, image_shape=IMAGE_SHAPE, seed: int = 0) -> Network:
    """Construct a freshly initialised network for ``role`` and ``modality``.

    Shapes close over the pipeline: the key encoder emits the protected model's
    input, and the decoder reads the protected model's output.
    """
    if modality not in forge.MODALITIES:
        raise ValueError(f"unsupported modality {modality!r}; expected one of {forge.MODALITIES}")
    if role == "key-encoder" and (key_dim is None or key_dim < 16):
        raise ValueError(f"key_dim must be >= 16, got {key_dim}")
    layers, in_shape = _layers_for(role, modality, key_dim, tuple(image_shape))
    net = Network(layers, in_shape, seed=seed)
    net.role, net.modality, net.seed = role, modality, seed
    return net


# -- protected model handle ---------------------------------------------------


class ProtectedModelHandle:
    """Read-only wrapper around a frozen model.

    Users get ``forward`` only.  The owner-side encoder additionally needs
    gradients w.r.t. the model *input* (never its parameters), exposed via
    :meth:`input_vjp`.
    """

    forward_only = True

    def __init__(self, network: Network, modality: str, checkpoint: str | None = None):
        if not network.frozen:
            network.freeze()
        self.__net = network
        self.modality = modality
        self.checkpoint = checkpoint
        self._digest = network.digest()

    @property
    def input_shape(self):
        return self.__net.input_shape

    @property
    def output_shape(self):
        return self.__net.output_shape

    def forward(self, x) -> np.ndarray:
        return self.__net.forward(x)

    __call__ = forward

    def input_vjp(self, x):
        """``(M(x), pullback)`` where ``pullback(dy) -> dL/dx``; no parameter grads."""
        y, tape = self.__net.forward_with_tape(x)

        def pullback(dy):
            dx, grads = self.__net.backward(tape, dy, need_input_grad=True)
            assert not grads, "frozen model produced parameter gradients"
            return dx

        return y, pullback

    def digest(self) -> str:
        """Recomputed from the live parameter bytes on every call."""
        return self.__net.digest()

    @property
    def recorded_digest(self) -> str:
        return self._digest

    def _network(self) -> Network:
        # package-internal: checkpoint writing only
        return self.__net

    def __repr__(self):
        return f"ProtectedModelHandle({self.modality}, digest={self._digest})"


# -- pretraining ----------------------------------------------------------------


def _mmd2_and_grad(x: np.ndarray, y: np.ndarray, bandwidths=(2.0, 5.0, 10.0)):
    """Biased multi-bandwidth Gaussian MMD^2 between batches and its gradient w.r.t. ``x``."""
    xf = x.reshape(len(x), -1).astype(np.float64)
    yf = y.reshape(len(y), -1).astype(np.float64)
    n, m = len(xf), len(yf)

    def sqd(a, b):
        return np.maximum((a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T, 0.0)

    dxx, dxy, dyy = sqd(xf, xf), sqd(xf, yf), sqd(yf, yf)
    value = 0.0
    grad = np.zeros_like(xf)
    for s in bandwidths:
        kxx = np.exp(-dxx / (2 * s * s))
        kxy = np.exp(-dxy / (2 * s * s))
        kyy = np.exp(-dyy / (2 * s * s))
        value += kxx.mean() + kyy.mean() - 2 * kxy.mean()
        # d/dx_i of mean k(x_i, x_j) counts each pair twice
        gxx = (kxx.sum(1)[:, None] * xf - kxx @ xf) * (-2.0 / (n * n * s * s))
        gxy = (kxy.sum(1)[:, None] * xf - kxy @ yf) * (-1.0 / (n * m * s * s))
        grad += gxx - 2 * gxy
    return value, grad.reshape(x.shape).astype(np.float32)


def _pretrain_denoiser(net, epochs, seed, n_train=512, n_val=128, batch=16, lr=2e-3):
    rng = np.random.default_rng(seed)
    train = forge.synth_task_dataset("I2I", n_train, seed)
    val = forge.synth_task_dataset("I2I", n_val, seed + 1)
    xs, ys = forge.stack_inputs(train), forge.stack_targets(train)
    vx, vy = forge.stack_inputs(val), forge.stack_targets(val)
    opt = Adam(net.parameters(), lr=lr)
    for epoch in range(epochs):
        order = rng.permutation(n_train)
        for i in range(0, n_train, batch):
            idx = order[i : i + batch]
            out, tape = net.forward_with_tape(xs[idx])
            diff = out - ys[idx]
            _, grads = net.backward(tape, 2.0 * diff / diff.size, need_input_grad=False)
            opt.step(grads)
    return float(np.mean((net.forward(vx) - vy) ** 2))


def _pretrain_generator(net, modality, epochs, seed, steps_per_epoch=20, batch=32, lr=2e-3):
    rng = np.random.default_rng(seed)
    opt = Adam(net.parameters(), lr=lr)
    conditional = modality == "NT2I"
    real_seed = seed * 1000 + 17
    for epoch in range(epochs):
        for step in range(steps_per_epoch):
            labels = np.full(batch, rng.integers(forge.N_CLASSES)) if conditional else None
            z = forge.noise_queries(modality, batch, rng, labels)
            real = forge.synth_shape_images(batch, real_seed, labels)
            real_seed += 1
            out, tape = net.forward_with_tape(z)
            _, dy = _mmd2_and_grad(out, real)
            _, grads = net.backward(tape, dy, need_input_grad=False)
            opt.step(grads)
    return generator_mmd(net, modality, seed + 1)


def generator_mmd(net, modality, seed, n=64) -> float:
    """Held-out MMD^2 between generated and real shapes (per class, averaged, for NT2I)."""
    rng = np.random.default_rng(seed)
    if modality == "N2I":
        z = forge.noise_queries(modality, n, rng)
        return float(_mmd2_and_grad(net.forward(z), forge.synth_shape_images(n, seed + 7))[0])
    values = []
    for c in range(forge.N_CLASSES):
        labels = np.full(n // 2, c)
        z = forge.noise_queries(modality, n // 2, rng, labels)
        real = forge.synth_shape_images(n // 2, seed + 7 + c, labels)
        values.append(_mmd2_and_grad(net.forward(z), real)[0])
    return float(np.mean(values))


def pretrain_protected_model(
    modality: str, epochs: int = 50, seed: int = 0, image_shape=IMAGE_SHAPE, ceiling: float | None = None
) -> ProtectedModelHandle:
    """Train the desk-scale victim for ``modality`` and freeze it.

    I2I is a denoiser scored by held-out per-pixel MSE; N2I/NT2I are
    (conditional) generators fitted by kernel MMD to synthetic shapes.
    """
    net = build_network("protected", modality, None, image_shape, seed)
    if modality == "I2I":
        final = _pretrain_denoiser(net, epochs, seed)
    else:
        final = _pretrain_generator(net, modality, epochs, seed)
    ceiling = TASK_CEILING[modality] if ceiling is None else ceiling
    log.info("pretrained %s victim: held-out error %.5f (ceiling %.5f)", modality, final, ceiling)
    if not final <= ceiling:
        raise PretrainingError(
            f"{modality} pretraining ended at {final:.5f}, above ceiling {ceiling}", final_loss=final
        )
    handle = ProtectedModelHandle(net, modality)
    handle.task_error = final
    return handle


# -- checkpoints ------------------------------------------------------------------


@dataclass
class NetworkCheckpoint:
    manifest: dict
    network: Network
    path: Path | None = None
    extra: dict = field(default_factory=dict)

    @property
    def role(self) -> str:
        return self.manifest["role"]

    @property
    def digest(self) -> str:
        return self.manifest["digest_fnv1a64"]


def save_checkpoint(net, path, role=None, modality=None, seed=None, extra=None) -> Path:
    """Write ``manifest.json`` + ``params/<name>.f32`` (little-endian, row-major)."""
    if isinstance(net, ProtectedModelHandle):
        modality = modality or net.modality
        role = role or "protected"
        net = net._network()
    role = role or getattr(net, "role", None)
    modality = modality or getattr(net, "modality", None)
    seed = getattr(net, "seed", None) if seed is None else seed
    if role not in ROLES:
        raise ValueError(f"checkpoint role must be one of {ROLES}, got {role!r}")
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    params = net.parameters()
    for p in params:
        (path / "params" / f"{p.name}.f32").write_bytes(array_bytes(p.data))
    manifest = {
        "role": role,
        "modality": modality,
        "layers": net.spec(),
        "shapes": {"input": list(net.input_shape), "output": list(net.output_shape)},
        "params": [{"name": p.name, "shape": list(p.shape)} for p in params],
        "seed": seed,
        "digest_fnv1a64": net.digest(),
    }
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path, trainable: bool = False) -> NetworkCheckpoint:
    """Read and digest-verify a checkpoint directory.

    A ``protected`` checkpoint can never be loaded trainable.
    """
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("role") not in ROLES:
        raise ValueError(f"unknown checkpoint role {manifest.get('role')!r}")
    if manifest["role"] == "protected" and trainable:
        raise FrozenParameterError("protected-model checkpoints are always loaded frozen")

    blobs = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        raw = (path / "params" / f"{entry['name']}.f32").read_bytes()
        if len(raw) != 4 * int(np.prod(shape)):
            raise ShapeError(
                f"blob {entry['name']} has {len(raw)} bytes, manifest shape {shape} needs {4 * int(np.prod(shape))}"
            )
        blobs[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    digest = hexdigest(array_bytes(b) for b in blobs.values())
    if digest != manifest["digest_fnv1a64"]:
        raise CorruptionError(
            f"digest mismatch in {path}: manifest {manifest['digest_fnv1a64']}, blobs {digest}"
        )
    net = Network.from_spec(manifest["layers"], manifest["shapes"]["input"], params=blobs)
    if list(net.output_shape) != list(manifest["shapes"]["output"]):
        raise ShapeError(
            f"manifest output shape {manifest['shapes']['output']} != architecture {net.output_shape}"
        )
    if [p.name for p in net.parameters()] != list(blobs):
        raise ShapeError("manifest parameters do not match the architecture")
    net.role, net.modality, net.seed = manifest["role"], manifest.get("modality"), manifest.get("seed")
    if not trainable:
        net.freeze()
    return NetworkCheckpoint(manifest, net, path, manifest.get("extra", {}))


def load_protected(path) -> ProtectedModelHandle:
    ckpt = load_checkpoint(path)
    if ckpt.role != "protected":
        raise ValueError(f"{path} holds a {ckpt.role!r} checkpoint, not a protected model")
    return ProtectedModelHandle(ckpt.network, ckpt.manifest["modality"], checkpoint=str(path))


def load_blackbox(path) -> ProtectedModelHandle:
    """Load a protected or surrogate checkpoint behind the forward-only handle."""
    ckpt = load_checkpoint(path)
    if ckpt.role not in ("protected", "surrogate"):
        raise ValueError(f"{path} holds a {ckpt.role!r} checkpoint; only M-slot models qualify")
    handle = ProtectedModelHandle(ckpt.network, ckpt.manifest["modality"], checkpoint=str(path))
    handle.role = ckpt.role
    return handle
