"""NCC / NCCD metrics and the two ownership decision rules."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeError
from .keys import Key, sample_wrong_key


def ncc(a, b, centered: bool = False) -> float:
    """Normalized cross-correlation <a, b> / (|a| |b|).

    ``centered=True`` subtracts each operand's mean first (Pearson form).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"ncc operands differ in size: {a.size} vs {b.size}")
    if centered:
        a = a - a.mean()
        b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("ncc is undefined for an all-zero operand")
    return float(np.dot(a, b) / (na * nb))


def ncc_batch(batch, ref, centered: bool = False) -> np.ndarray:
    """Row-wise NCC of every sample in ``batch`` against one reference."""
    x = np.asarray(batch, dtype=np.float64).reshape(len(batch), -1)
    r = np.asarray(ref, dtype=np.float64).ravel()
    if x.shape[1] != r.size:
        raise ShapeError(f"ncc operands differ in size: {x.shape[1]} vs {r.size}")
    if centered:
        x = x - x.mean(axis=1, keepdims=True)
        r = r - r.mean()
    norms = np.linalg.norm(x, axis=1) * np.linalg.norm(r)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (x @ r) / norms
    # an all-zero extraction carries no mark at all
    return np.where(norms > 0, out, 0.0)


def nccd(extracted, wrong_extracted, mark, centered: bool = False) -> float:
    """NCC of the correct-key extraction minus NCC of a wrong-key extraction."""
    return ncc(extracted, mark, centered) - ncc(wrong_extracted, mark, centered)


@dataclass(frozen=True)
class VerificationPolicy:
    ncc_threshold: float = 0.95
    nccd_threshold: float = 0.5
    nccd_trials: int = 1
    wrong_key_seed: int = 0
    centered: bool = False

    def __post_init__(self):
        for name in ("ncc_threshold", "nccd_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.nccd_trials < 1:
            raise ValueError("nccd_trials must be >= 1")

    def decide(self, mode: str, metrics: dict) -> int:
        if mode == "original":
            return int(metrics["ncc"] > self.ncc_threshold)
        if mode == "surrogate":
            return int(metrics["nccd"] > self.nccd_threshold)
        raise ValueError(f"unknown verification mode {mode!r}")


@dataclass
class VerificationReport:
    mode: str
    ncc: float
    nccd: float | None
    decision: int
    policy: dict
    key_digest: str
    wrongkey_seeds: list[int] = field(default_factory=list)
    wrong_ncc: list[float] = field(default_factory=list)
    pipeline_digests: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    timestamp: float = field(default_factory=time.time)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        return cls(**d)

    def rederive_decision(self) -> int:
        """Recompute the decision bit from stored metrics and policy."""
        return VerificationPolicy(**self.policy).decide(
            self.mode, {"ncc": self.ncc, "nccd": self.nccd}
        )


def verify_original(pipeline, blackbox, key: Key, mark, policy: VerificationPolicy | None = None) -> VerificationReport:
    """Decision 1 iff NCC(decoded mark, mark) exceeds the NCC threshold."""
    policy = policy or VerificationPolicy()
    m = getattr(mark, "data", mark)
    extracted = pipeline.decode(key, blackbox)
    score = ncc(extracted, m, policy.centered)
    return VerificationReport(
        mode="original",
        ncc=score,
        nccd=None,
        decision=policy.decide("original", {"ncc": score}),
        policy=asdict(policy),
        key_digest=key.digest,
        pipeline_digests=pipeline.digests(),
    )


def verify_surrogate(pipeline, suspect, key: Key, mark, policy: VerificationPolicy | None = None) -> VerificationReport:
    """Decision 1 iff NCCD(correct-key, random-wrong-key extractions) exceeds the NCCD threshold.

    With ``nccd_trials > 1`` the wrong-key NCC is averaged over that many seeded
    wrong keys; the report says so.
    """
    policy = policy or VerificationPolicy()
    m = getattr(mark, "data", mark)
    score = ncc(pipeline.decode(key, suspect), m, policy.centered)
    seeds = [policy.wrong_key_seed + i for i in range(policy.nccd_trials)]
    wrong = []
    for s in seeds:
        wk = sample_wrong_key(key, np.random.default_rng(s))
        wrong.append(float(ncc_batch(pipeline.decode(wk, suspect)[None], m, policy.centered)[0]))
    diff = score - float(np.mean(wrong))
    notes = []
    if policy.nccd_trials > 1:
        notes.append(f"wrong-key NCC averaged over {policy.nccd_trials} keys")
    return VerificationReport(
        mode="surrogate",
        ncc=score,
        nccd=diff,
        decision=policy.decide("surrogate", {"nccd": diff}),
        policy=asdict(policy),
        key_digest=key.digest,
        wrongkey_seeds=seeds,
        wrong_ncc=wrong,
        pipeline_digests=pipeline.digests(),
        notes=notes,
    )
