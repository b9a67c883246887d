"""Secret key generation, wrong-key sampling and key files.

The generator is public (standard-normal entries from a seeded PCG64 stream);
only the drawn vector is secret.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .digest import array_bytes, hexdigest
from .errors import CorruptionError, ShadowMarkError

MIN_KEY_DIM = 16
WRONG_KEY_MIN_DISTANCE = 1.0
MAX_REDRAWS = 100


@dataclass(frozen=True)
class Key:
    vector: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.vector, dtype=np.float32)
        if v.ndim != 1:
            raise ValueError(f"key must be a vector, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("key entries must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    @property
    def digest(self) -> str:
        return hexdigest([array_bytes(self.vector)])

    def distance(self, other: "Key") -> float:
        return float(np.linalg.norm(self.vector.astype(np.float64) - other.vector))

    def __eq__(self, other):
        return isinstance(other, Key) and np.array_equal(self.vector, other.vector)

    def __hash__(self):
        return hash(self.digest)


def _draw(key_dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(key_dim).astype(np.float32)


def keygen(key_dim: int = 256, seed: int | None = None) -> Key:
    if key_dim < MIN_KEY_DIM:
        raise ValueError(f"key_dim must be >= {MIN_KEY_DIM}, got {key_dim}")
    return Key(_draw(key_dim, np.random.default_rng(seed)), seed=seed)


def keygen_batch(key_dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent key vectors as rows (same distribution as :func:`keygen`)."""
    if key_dim < MIN_KEY_DIM:
        raise ValueError(f"key_dim must be >= {MIN_KEY_DIM}, got {key_dim}")
    return rng.standard_normal((n, key_dim)).astype(np.float32)


def sample_wrong_key(correct: Key, rng: np.random.Generator, min_distance: float = WRONG_KEY_MIN_DISTANCE) -> Key:
    """Fresh key draw at L2 distance >= ``min_distance`` from ``correct``."""
    for _ in range(MAX_REDRAWS):
        candidate = Key(_draw(correct.dim, rng))
        if candidate.distance(correct) >= min_distance:
            return candidate
    raise ShadowMarkError(f"no wrong key found after {MAX_REDRAWS} redraws")


def save_key(key: Key, path) -> Path:
    """Write ``<path>`` (raw little-endian float32) and ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(array_bytes(key.vector))
    sidecar = {"key_dim": key.dim, "digest_fnv1a64": key.digest}
    if key.seed is not None:
        sidecar["seed"] = key.seed
    Path(f"{path}.json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_key(path) -> Key:
    path = Path(path)
    sidecar = json.loads(Path(f"{path}.json").read_text())
    raw = path.read_bytes()
    if len(raw) != 4 * sidecar["key_dim"]:
        raise CorruptionError(f"key file has {len(raw)} bytes, expected {4 * sidecar['key_dim']}")
    key = Key(np.frombuffer(raw, dtype="<f4").copy(), seed=sidecar.get("seed"))
    if key.digest != sidecar["digest_fnv1a64"]:
        raise CorruptionError(f"key digest mismatch for {path}")
    return key
