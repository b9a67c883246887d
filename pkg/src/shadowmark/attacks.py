"""Threat-model attacks: surrogate distillation, watermark-transfer tracking and
brute-force key ambiguity.

Every attack reaches the protected model through its ``forward`` callable only.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as forge
from .keys import Key, keygen_batch, sample_wrong_key
from .nn import DTYPE, Adam, Network
from .verdict import ncc_batch
from .zoo import ProtectedModelHandle, build_network

log = logging.getLogger(__name__)

CURVE_FIELDS = ("epoch", "task_loss", "ncc_correct", "ncc_wrong")


@dataclass(frozen=True)
class QueryBudget:
    n_queries: int
    seed: int = 0
    modality: str = "I2I"

    def __post_init__(self):
        if self.n_queries < 1:
            raise ValueError("query budget must be >= 1")


@dataclass
class DistillationSet:
    inputs: np.ndarray
    outputs: np.ndarray
    modality: str

    def __len__(self):
        return len(self.inputs)


def harvest_queries(blackbox, budget: QueryBudget, chunk: int = 256) -> DistillationSet:
    """Query the black box on ``n_queries`` samples from the task distribution."""
    fwd = getattr(blackbox, "forward", blackbox)
    samples = forge.synth_task_dataset(budget.modality, budget.n_queries, budget.seed)
    xs = forge.stack_inputs(samples)
    ys = np.concatenate([fwd(xs[i : i + chunk]) for i in range(0, len(xs), chunk)])
    return DistillationSet(xs, ys.astype(DTYPE), budget.modality)


@dataclass
class SurrogateResult:
    surrogate: ProtectedModelHandle
    network: Network
    log: list[dict] = field(default_factory=list)
    heldout_mse: float | None = None


def _channel_ncc(pipeline, model, key, wrong_keys, mark):
    if pipeline is None or key is None:
        return float("nan"), float("nan")
    keys = np.concatenate([key.vector[None], wrong_keys])
    scores = ncc_batch(pipeline.decode_batch(keys, model), mark)
    return float(scores[0]), float(scores[1:].mean())


def train_surrogate(
    distillation: DistillationSet,
    surrogate: Network | None = None,
    epochs: int = 30,
    seed: int = 0,
    pipeline=None,
    key: Key | None = None,
    batch: int = 32,
    lr: float = 1e-3,
    n_wrong: int = 8,
    heldout: DistillationSet | None = None,
) -> SurrogateResult:
    """Fit a surrogate to black-box pairs by plain mean-square distillation.

    When ``pipeline`` and ``key`` are given (the owner's view, used to chart
    transfer), each epoch also logs the NCC of marks decoded through the
    surrogate with the correct key and with ``n_wrong`` fixed wrong keys.
    Nothing here touches G, D or the protected model.
    """
    if surrogate is None:
        surrogate = build_network("surrogate", distillation.modality, None, seed=seed)
    rng = np.random.default_rng(seed)
    mark = None if pipeline is None else pipeline.mark
    wrong = None
    if key is not None:
        wrong = np.stack([sample_wrong_key(key, np.random.default_rng([seed, 7, i])).vector for i in range(n_wrong)])
    digests = None if pipeline is None else pipeline.digests()

    opt = Adam(surrogate.parameters(), lr=lr)
    xs, ys = distillation.inputs, distillation.outputs
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(xs))
        total, count = 0.0, 0
        for i in range(0, len(xs), batch):
            idx = order[i : i + batch]
            out, tape = surrogate.forward_with_tape(xs[idx])
            diff = out - ys[idx]
            loss = float(np.mean(diff.astype(np.float64) ** 2))
            if not math.isfinite(loss):
                raise FloatingPointError(f"surrogate training diverged at epoch {epoch}")
            _, grads = surrogate.backward(tape, 2.0 * diff / diff.size, need_input_grad=False)
            opt.step(grads)
            total += loss * len(idx)
            count += len(idx)
        ok, bad = _channel_ncc(pipeline, surrogate, key, wrong, mark)
        history.append({"epoch": epoch, "task_loss": total / count, "ncc_correct": ok, "ncc_wrong": bad})
        log.debug("surrogate epoch %d %s", epoch, history[-1])

    if digests is not None and pipeline.digests() != digests:
        raise RuntimeError("surrogate training mutated the watermark pipeline")
    handle = ProtectedModelHandle(surrogate, distillation.modality)
    handle.role = "surrogate"
    result = SurrogateResult(handle, surrogate, history)
    if heldout is not None:
        result.heldout_mse = float(np.mean((handle.forward(heldout.inputs) - heldout.outputs) ** 2))
    return result


# -- brute force ---------------------------------------------------------------------


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("n must be positive")
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class AmbushReport:
    n_trials: int
    n_success: int
    sr_a: float
    wilson_low: float
    wilson_high: float
    threshold: float
    seed: int
    max_ncc: float
    mean_ncc: float
    injected: int = 0
    pipeline_digests: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def brute_force_ambiguity(
    pipeline,
    blackbox,
    mark,
    n_trials: int,
    seed: int = 0,
    threshold: float = 0.95,
    inject: list[Key] | None = None,
    chunk: int = 500,
) -> AmbushReport:
    """Guess ``n_trials`` keys from the public key distribution.

    A trial succeeds when the decoded mark passes the original-model NCC rule.
    ``inject`` replaces the first trials with given keys (sanity plants).
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    m = np.asarray(getattr(mark, "data", mark), dtype=DTYPE)
    key_dim = pipeline.G.input_shape[0]
    rng = np.random.default_rng(seed)
    planted = [k.vector for k in (inject or [])][:n_trials]
    successes, done = 0, 0
    best, running = -np.inf, 0.0
    while done < n_trials:
        n = min(chunk, n_trials - done)
        keys = keygen_batch(key_dim, n, rng)
        for j in range(n):
            if done + j < len(planted):
                keys[j] = planted[done + j]
        scores = ncc_batch(pipeline.decode_batch(keys, blackbox), m)
        successes += int((scores > threshold).sum())
        best = max(best, float(scores.max()))
        running += float(scores.sum())
        done += n
    lo, hi = wilson_interval(successes, n_trials)
    return AmbushReport(
        n_trials=n_trials,
        n_success=successes,
        sr_a=successes / n_trials,
        wilson_low=lo,
        wilson_high=hi,
        threshold=threshold,
        seed=seed,
        max_ncc=best,
        mean_ncc=running / n_trials,
        injected=len(planted),
        pipeline_digests=pipeline.digests(),
    )


# -- transfer curve ----------------------------------------------------------------


def transfer_curve(pipeline, surrogate_log: list[dict], out_dir, title: str = "") -> dict:
    """Write ``transfer_curve.csv`` and a chart of loss / NCC versus surrogate epoch."""
    if not surrogate_log:
        raise ValueError("surrogate log is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "transfer_curve.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in surrogate_log:
            writer.writerow({k: repr(float(row[k])) if k != "epoch" else int(row[k]) for k in CURVE_FIELDS})

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r["epoch"] for r in surrogate_log]
    fig, ax_loss = plt.subplots(figsize=(6, 3.5))
    ax_loss.plot(epochs, [r["task_loss"] for r in surrogate_log], "b-o", ms=3, label="task loss")
    ax_loss.set_xlabel("surrogate epoch")
    ax_loss.set_ylabel("distillation MSE")
    ax_loss.set_yscale("log")
    ax_ncc = ax_loss.twinx()
    ax_ncc.plot(epochs, [r["ncc_correct"] for r in surrogate_log], "g-D", ms=4, label="NCC correct key")
    ax_ncc.plot(epochs, [r["ncc_wrong"] for r in surrogate_log], "r-s", ms=3, label="NCC wrong key")
    if pipeline is not None and pipeline.log:
        ax_ncc.axhline(pipeline.log[-1]["ncc_correct"], color="g", ls=":", lw=1)
    ax_ncc.set_ylabel("NCC")
    ax_ncc.set_ylim(-1.05, 1.05)
    lines = ax_loss.get_legend_handles_labels()
    lines2 = ax_ncc.get_legend_handles_labels()
    ax_ncc.legend(lines[0] + lines2[0], lines[1] + lines2[1], loc="lower right", fontsize=8)
    if title:
        ax_loss.set_title(title)
    fig.tight_layout()
    png_path = out / "transfer_curve.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "png": png_path, "rows": len(surrogate_log)}


def read_transfer_curve(path) -> list[dict]:
    with Path(path).open() as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
