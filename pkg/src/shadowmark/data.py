"""Synthetic task data, watermark images and 8-bit PNG I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import font5x7
from .digest import array_bytes, hexdigest
from .errors import CorruptionError, ShapeError

MARK_MAX = 1.0 - 2.0**-8  # largest 8-bit level below 1, keeps marks in [0, 1)
MODALITIES = ("I2I", "N2I", "NT2I")
MARK_KINDS = ("text", "binary", "pepper", "pink")
SHAPE_KINDS = (
    "disk",
    "square",
    "triangle",
    "ring",
    "plus",
    "diamond",
    "hbar",
    "vbar",
    "ellipse",
    "frame",
)
NOISE_DIM = 100
N_CLASSES = len(SHAPE_KINDS)
NOISE_SIGMA = 0.1
PEPPER_RATE = 0.05
PINK_EXPONENT = 1.0


@dataclass(frozen=True)
class WatermarkImage:
    data: np.ndarray
    kind: str

    def __post_init__(self):
        d = self.data
        if not (np.all(d >= 0.0) and np.all(d < 1.0)):
            raise ValueError("watermark values must lie in [0, 1)")

    @property
    def shape(self):
        return self.data.shape

    def digest(self) -> str:
        return hexdigest([array_bytes(self.data)])


@dataclass
class TaskSample:
    input: np.ndarray
    modality: str
    target: np.ndarray | None = None
    label: int | None = None


def _check_shape(shape) -> tuple[int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ShapeError(f"image shape must be (C, H, W), got {shape}")
    return shape


# -- watermarks ------------------------------------------------------------


def render_text_mark(text: str, shape=(1, 32, 32), seed: int = 0) -> WatermarkImage:
    """Rasterize ``text`` with the built-in 5x7 font at the largest integer scale.

    Text wraps at character boundaries when a single line would not fit.  The
    seed only jitters placement inside whatever margin remains.
    """
    c, h, w = _check_shape(shape)
    if not text or not text.isascii():
        raise ValueError("text must be a nonempty ASCII string")
    if h < 16 or w < 16:
        raise ShapeError(f"raster must be at least 16x16, got {h}x{w}")
    for ch in text:
        if not font5x7.supported(ch):
            raise ValueError(f"no glyph for character {ch!r}")

    gw, gh = font5x7.GLYPH_W, font5x7.GLYPH_H
    layout = None
    for scale in range(max(h, w) // gh, 0, -1):
        per_line = (w + scale) // ((gw + 1) * scale)
        if per_line < 1:
            continue
        lines = [text[i : i + per_line] for i in range(0, len(text), per_line)]
        height = len(lines) * (gh + 1) * scale - scale
        if height <= h:
            layout = scale, lines
            break
    if layout is None:
        raise ValueError(f"text {text!r} does not fit a {h}x{w} raster")
    scale, lines = layout

    text_h = len(lines) * (gh + 1) * scale - scale
    text_w = max(len(line) for line in lines) * (gw + 1) * scale - scale
    rng = np.random.default_rng(seed)
    top = (h - text_h) // 2 + int(rng.integers(-((h - text_h) // 4), (h - text_h) // 4 + 1))
    raster = np.zeros((h, w), dtype=bool)
    for row, line in enumerate(lines):
        y0 = top + row * (gh + 1) * scale
        line_w = len(line) * (gw + 1) * scale - scale
        x0 = (w - text_w) // 2 + (text_w - line_w) // 2
        for col, ch in enumerate(line):
            g = np.kron(font5x7.glyph(ch), np.ones((scale, scale), dtype=bool))
            xs = x0 + col * (gw + 1) * scale
            raster[y0 : y0 + gh * scale, xs : xs + gw * scale] |= g
    data = np.broadcast_to(raster * np.float32(MARK_MAX), (c, h, w)).astype(np.float32)
    return WatermarkImage(data, "text")


def _pink_noise(h: int, w: int, rng: np.random.Generator, exponent: float) -> np.ndarray:
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.sqrt(fy**2 + fx**2)
    f[0, 0] = 1.0
    amplitude = f ** (-exponent / 2.0)  # power ~ 1/f^exponent
    amplitude[0, 0] = 0.0
    phase = rng.uniform(0, 2 * np.pi, size=amplitude.shape)
    mag = amplitude * rng.rayleigh(size=amplitude.shape)
    return np.fft.irfft2(mag * np.exp(1j * phase), s=(h, w))


def make_noise_mark(kind: str, shape=(1, 32, 32), seed: int = 0) -> WatermarkImage:
    """Random marks: ``binary`` fair coin, ``pepper`` 5% bright dots, ``pink`` 1/f noise."""
    c, h, w = _check_shape(shape)
    rng = np.random.default_rng(seed)
    if kind == "binary":
        data = rng.integers(0, 2, size=(c, h, w)) * MARK_MAX
    elif kind == "pepper":
        data = (rng.random((c, h, w)) < PEPPER_RATE) * MARK_MAX
    elif kind == "pink":
        data = np.stack([_pink_noise(h, w, rng, PINK_EXPONENT) for _ in range(c)])
        lo, hi = data.min(), data.max()
        data = (data - lo) / (hi - lo) * MARK_MAX
    else:
        raise ValueError(f"unknown noise mark kind {kind!r}; expected binary, pepper or pink")
    return WatermarkImage(np.minimum(data, MARK_MAX).astype(np.float32), kind)


def make_mark(spec: str, shape=(1, 32, 32), seed: int = 0) -> WatermarkImage:
    """``"binary"``/``"pepper"``/``"pink"`` or any other string rendered as text."""
    if spec in ("binary", "pepper", "pink"):
        return make_noise_mark(spec, shape, seed)
    return render_text_mark(spec, shape, seed)


# -- synthetic shapes --------------------------------------------------------


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    if kind == "disk":
        return u * u + v * v <= 1.0
    if kind == "square":
        return np.maximum(au, av) <= 0.8
    if kind == "triangle":
        return (v <= 0.75) & (au <= (v + 0.85) * 0.55)
    if kind == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.3)
    if kind == "plus":
        return ((au <= 0.3) & (av <= 1.0)) | ((av <= 0.3) & (au <= 1.0))
    if kind == "diamond":
        return au + av <= 1.0
    if kind == "hbar":
        return (au <= 1.0) & (av <= 0.35)
    if kind == "vbar":
        return (av <= 1.0) & (au <= 0.35)
    if kind == "ellipse":
        return u * u + (v / 0.55) ** 2 <= 1.0
    if kind == "frame":
        m = np.maximum(au, av)
        return (m <= 0.9) & (m >= 0.55)
    raise ValueError(f"unknown shape kind {kind!r}")


def render_shape(kind: str, cx: float, cy: float, radius: float, size: int, supersample: int = 4):
    """Anti-aliased coverage map (size x size, values in [0, 1]) of one shape."""
    ss = supersample
    coords = (np.arange(size * ss) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    mask = _shape_mask(kind, (xx - cx) / radius, (yy - cy) / radius)
    return mask.reshape(size, ss, size, ss).mean(axis=(1, 3))


def _random_shape(rng, size, kind=None):
    kind = SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))] if kind is None else kind
    radius = rng.uniform(0.14, 0.3) * size
    cx, cy = rng.uniform(radius * 0.6, size - radius * 0.6, size=2)
    return render_shape(kind, cx, cy, radius, size)


def synth_clean_image(rng: np.random.Generator, shape=(1, 32, 32)) -> np.ndarray:
    """Background plus 1-3 randomly placed shapes of random intensity."""
    c, h, w = shape
    img = np.full((h, w), rng.uniform(0.0, 0.15))
    for _ in range(int(rng.integers(1, 4))):
        alpha = _random_shape(rng, h)
        img = img * (1 - alpha) + rng.uniform(0.35, 1.0) * alpha
    return np.broadcast_to(img, (c, h, w)).astype(np.float32)


def synth_shape_images(n: int, seed: int, labels=None, shape=(1, 32, 32)) -> np.ndarray:
    """Single-shape images on black; ``labels`` (class = shape kind) fixes the kind per image."""
    c, h, w = _check_shape(shape)
    rng = np.random.default_rng(seed)
    out = np.empty((n, c, h, w), dtype=np.float32)
    for i in range(n):
        kind = None if labels is None else SHAPE_KINDS[int(labels[i])]
        out[i] = _random_shape(rng, h, kind) * rng.uniform(0.6, 1.0)
    return out


def noise_queries(modality: str, n: int, rng: np.random.Generator, labels=None) -> np.ndarray:
    """Noise (N2I) or noise + one-hot label (NT2I) query vectors."""
    z = rng.standard_normal((n, NOISE_DIM)).astype(np.float32)
    if modality == "N2I":
        return z
    if modality == "NT2I":
        if labels is None:
            labels = rng.integers(0, N_CLASSES, size=n)
        onehot = np.zeros((n, N_CLASSES), dtype=np.float32)
        onehot[np.arange(n), np.asarray(labels)] = 1.0
        return np.concatenate([z, onehot], axis=1)
    raise ValueError(f"no noise queries for modality {modality!r}")


def synth_task_dataset(modality: str, n: int, seed: int, shape=(1, 32, 32)) -> list[TaskSample]:
    """Deterministic synthetic samples for a modality (pure function of its arguments)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if modality not in MODALITIES:
        raise ValueError(f"unsupported modality {modality!r}; expected one of {MODALITIES}")
    rng = np.random.default_rng(seed)
    if modality == "I2I":
        shape = _check_shape(shape)
        samples = []
        for _ in range(n):
            clean = synth_clean_image(rng, shape)
            noisy = clean + rng.normal(0.0, NOISE_SIGMA, size=shape).astype(np.float32)
            samples.append(TaskSample(noisy, modality, target=clean))
        return samples
    labels = rng.integers(0, N_CLASSES, size=n) if modality == "NT2I" else None
    xs = noise_queries(modality, n, rng, labels)
    return [
        TaskSample(xs[i], modality, label=None if labels is None else int(labels[i]))
        for i in range(n)
    ]


def stack_inputs(samples: list[TaskSample]) -> np.ndarray:
    return np.stack([s.input for s in samples]).astype(np.float32)


def stack_targets(samples: list[TaskSample]) -> np.ndarray:
    return np.stack([s.target for s in samples]).astype(np.float32)


def save_dataset(samples: list[TaskSample], path) -> None:
    """Cache a dataset as ``manifest.json`` + raw little-endian float32 blobs."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = {"inputs": stack_inputs(samples)}
    if samples[0].target is not None:
        blobs["targets"] = stack_targets(samples)
    manifest = {
        "modality": samples[0].modality,
        "n": len(samples),
        "shapes": {k: list(v.shape) for k, v in blobs.items()},
        "labels": [s.label for s in samples] if samples[0].label is not None else None,
        "digest_fnv1a64": hexdigest(array_bytes(v) for v in blobs.values()),
    }
    for name, arr in blobs.items():
        (path / f"{name}.f32").write_bytes(array_bytes(arr))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(path) -> list[TaskSample]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    blobs = {}
    for name, shape in manifest["shapes"].items():
        raw = (path / f"{name}.f32").read_bytes()
        if len(raw) != 4 * int(np.prod(shape)):
            raise CorruptionError(f"{name}.f32 has {len(raw)} bytes, expected {4 * int(np.prod(shape))}")
        blobs[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if hexdigest(array_bytes(v) for v in blobs.values()) != manifest["digest_fnv1a64"]:
        raise CorruptionError(f"dataset digest mismatch in {path}")
    labels = manifest.get("labels") or [None] * manifest["n"]
    targets = blobs.get("targets")
    return [
        TaskSample(
            blobs["inputs"][i],
            manifest["modality"],
            target=None if targets is None else targets[i],
            label=labels[i],
        )
        for i in range(manifest["n"])
    ]


# -- image files -------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG as a (C, H, W) array with pixel p -> p/256."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            raise ValueError(f"unsupported image mode {im.mode!r}; need 8-bit L or RGB")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return (arr.astype(np.float32) / 256.0).astype(np.float32)


def to_uint8(tensor: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(tensor, dtype=np.float64) * 256.0), 0, 255).astype(np.uint8)


def save_image(tensor: np.ndarray, path) -> None:
    """Write a (C, H, W) or (H, W) array in [0, 1) as PNG via floor(v * 256)."""
    arr = to_uint8(tensor)
    if arr.ndim == 3:
        if arr.shape[0] == 1:
            arr = arr[0]
        elif arr.shape[0] == 3:
            arr = arr.transpose(1, 2, 0)
        else:
            raise ShapeError(f"cannot save {arr.shape[0]}-channel image")
    Image.fromarray(np.ascontiguousarray(arr)).save(path)


def load_mark(path, kind: str = "text") -> WatermarkImage:
    return WatermarkImage(load_image(path), kind)
