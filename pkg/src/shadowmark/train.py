"""Key-encoder / decoder training around a frozen model, and mark extraction.

The objective is the unweighted sum of three per-element mean-square terms::

    L_k   = ms(D(M(G(k)))  - m)                 correct key -> mark
    L_k~  = 1 / (ms(D(M(G(k~))) - m) + eps)     wrong keys pushed away
    L_x   = 1 / (ms(D(M(x))     - m) + eps)     normal queries pushed away

Only G and D are updated.  M contributes input gradients on the key path and
nothing at all on the normal-query path.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as forge
from .errors import DivergenceError, ShapeError
from .keys import Key, keygen_batch, sample_wrong_key
from .nn import DTYPE, Adam, Network, check_loss
from .verdict import ncc_batch
from .zoo import ProtectedModelHandle, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "L_k", "L_wrongk", "L_x", "ncc_correct", "ncc_wrong_mean")


# -- loss terms on decoder outputs ---------------------------------------------


def _check_eps(eps: float) -> None:
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")


def mse_and_grad(y: np.ndarray, m: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean square over all elements of one sample and its gradient."""
    if y.shape != m.shape:
        raise ShapeError(f"decoder output {y.shape} vs mark {m.shape}")
    diff = y.astype(np.float64) - m
    return float(np.mean(diff * diff)), (2.0 * diff / diff.size)


def reciprocal_and_grad(y: np.ndarray, m: np.ndarray, eps: float) -> tuple[float, np.ndarray]:
    """``1 / (ms(y - m) + eps)`` and its gradient."""
    _check_eps(eps)
    d, dd = mse_and_grad(y, m)
    value = 1.0 / (d + eps)
    return value, -(value * value) * dd


def _batch_terms(outputs, m, eps, reciprocal):
    """Mean over the batch of per-sample terms; returns (value, dL/doutputs)."""
    values, grads = [], []
    for y in outputs:
        v, g = reciprocal_and_grad(y, m, eps) if reciprocal else mse_and_grad(y, m)
        values.append(v)
        grads.append(g)
    n = len(outputs)
    return float(np.mean(values)), (np.stack(grads) / n).astype(DTYPE)


def _mark_array(m) -> np.ndarray:
    return np.asarray(getattr(m, "data", m), dtype=DTYPE)


def _key_array(k) -> np.ndarray:
    v = k.vector if isinstance(k, Key) else np.asarray(k, dtype=DTYPE)
    return v[None] if v.ndim == 1 else v


def loss_correct_key(G: Network, D: Network, M, k, m) -> float:
    """Mean square between D(M(G(k))) and the mark."""
    m = _mark_array(m)
    y = D.forward(M.forward(G.forward(_key_array(k))))
    return _batch_terms(y, m, 0.0, reciprocal=False)[0]


def loss_wrong_key(G: Network, D: Network, M, k_wrong, m, eps: float = 1e-4) -> float:
    """``1 / (ms(D(M(G(k~))) - m) + eps)``, bounded in (0, 1/eps)."""
    _check_eps(eps)
    m = _mark_array(m)
    y = D.forward(M.forward(G.forward(_key_array(k_wrong))))
    return _batch_terms(y, m, eps, reciprocal=True)[0]


def loss_refine(D: Network, M, x, m, eps: float = 1e-4) -> float:
    """``1 / (ms(D(M(x)) - m) + eps)`` averaged over a batch of normal queries."""
    _check_eps(eps)
    m = _mark_array(m)
    x = np.asarray(x, dtype=DTYPE)
    if x.shape == tuple(M.input_shape):
        x = x[None]
    return _batch_terms(D.forward(M.forward(x)), m, eps, reciprocal=True)[0]


def refine_gradients(D: Network, M, x, m, eps: float = 1e-4) -> tuple[float, dict]:
    """Gradient map of the normal-query term; only decoder parameters can appear."""
    m = _mark_array(m)
    x = np.asarray(x, dtype=DTYPE)
    y, tape = D.forward_with_tape(M.forward(x))
    value, dy = _batch_terms(y, m, eps, reciprocal=True)
    _, grads = D.backward(tape, dy, need_input_grad=False)
    return value, grads


# -- training ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs_max: int = 200
    steps_per_epoch: int = 25
    key_replicas: int = 4
    key_noise: float = 0.2
    wrong_keys_per_step: int = 1
    queries_per_step: int = 8
    eps: float = 1e-4
    lr: float = 2e-4
    ncc_hi: float = 0.99
    ncc_lo: float = 0.2
    eval_wrong_keys: int = 16
    query_pool: int = 1024
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.eps < 1e-1:
            raise ValueError(f"eps must satisfy 0 < eps << 1, got {self.eps}")
        if self.key_noise < 0:
            raise ValueError("key_noise must be >= 0")
        if not self.ncc_hi > self.ncc_lo:
            raise ValueError("ncc_hi must exceed ncc_lo")
        for name in ("epochs_max", "steps_per_epoch", "key_replicas", "wrong_keys_per_step", "queries_per_step"):
            if getattr(self, name) < 0 or (name != "epochs_max" and getattr(self, name) < 1):
                raise ValueError(f"{name} must be positive")


class QuerySampler:
    """Normal queries from the protected model's pretraining distribution."""

    def __init__(self, modality: str, seed: int, pool: int = 1024, image_shape=None):
        self.modality = modality
        self.rng = np.random.default_rng(seed)
        self.pool = None
        if modality == "I2I":
            samples = forge.synth_task_dataset("I2I", pool, seed, shape=image_shape or (1, 32, 32))
            self.pool = forge.stack_inputs(samples)

    def __call__(self, n: int) -> np.ndarray:
        if self.pool is not None:
            return self.pool[self.rng.integers(0, len(self.pool), size=n)]
        return forge.noise_queries(self.modality, n, self.rng)


def heldout_queries(modality: str, n: int, seed: int, image_shape=(1, 32, 32)) -> np.ndarray:
    return forge.stack_inputs(forge.synth_task_dataset(modality, n, seed, shape=image_shape))


@dataclass
class TrainedPipeline:
    G: Network
    D: Network
    protected: ProtectedModelHandle
    mark: np.ndarray
    key_digest: str
    watermark_digest: str
    log: list[dict] = field(default_factory=list)
    converged: bool = False
    protected_digest_start: str = ""
    protected_digest_end: str = ""
    config: dict = field(default_factory=dict)
    elapsed_s: float = 0.0

    def decode(self, key, blackbox=None) -> np.ndarray:
        """``D(blackbox(G(key)))``; ``blackbox`` defaults to the protected model."""
        return decode(self.G, self.D, blackbox or self.protected, key)

    def decode_batch(self, keys: np.ndarray, blackbox=None, chunk: int = 256) -> np.ndarray:
        bb = blackbox or self.protected
        out = [
            self.D.forward(bb.forward(self.G.forward(keys[i : i + chunk])))
            for i in range(0, len(keys), chunk)
        ]
        return np.concatenate(out)

    def digests(self) -> dict:
        return {"G": self.G.digest(), "D": self.D.digest(), "M": self.protected.digest()}

    def write_log_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
            writer.writeheader()
            for row in self.log:
                writer.writerow(row)
        return path

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.G, out / "G", role="key-encoder")
        save_checkpoint(self.D, out / "D", role="decoder")
        forge.save_image(self.mark, out / "mark.png")
        np.save(out / "mark.npy", self.mark)
        self.write_log_csv(out / "train_log.csv")
        meta = {
            "key_digest": self.key_digest,
            "watermark_digest": self.watermark_digest,
            "converged": self.converged,
            "protected_checkpoint": self.protected.checkpoint,
            "protected_digest_start": self.protected_digest_start,
            "protected_digest_end": self.protected_digest_end,
            "config": self.config,
            "elapsed_s": self.elapsed_s,
            "digests": self.digests(),
        }
        (out / "pipeline.json").write_text(json.dumps(meta, indent=2))
        return out

    @classmethod
    def load(cls, out_dir, protected: ProtectedModelHandle) -> "TrainedPipeline":
        out = Path(out_dir)
        meta = json.loads((out / "pipeline.json").read_text())
        G = load_checkpoint(out / "G").network
        D = load_checkpoint(out / "D").network
        if protected.digest() != meta["protected_digest_end"]:
            raise ValueError("protected model digest differs from the one the pipeline was trained on")
        with (out / "train_log.csv").open() as fh:
            rows = [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
        return cls(
            G=G,
            D=D,
            protected=protected,
            mark=np.load(out / "mark.npy"),
            key_digest=meta["key_digest"],
            watermark_digest=meta["watermark_digest"],
            log=rows,
            converged=meta["converged"],
            protected_digest_start=meta["protected_digest_start"],
            protected_digest_end=meta["protected_digest_end"],
            config=meta["config"],
            elapsed_s=meta.get("elapsed_s", 0.0),
        )


def decode(G: Network, D: Network, blackbox_forward, key) -> np.ndarray:
    """Extract a mark: ``D(blackbox_forward(G(key)))`` with no training involved."""
    fwd = getattr(blackbox_forward, "forward", blackbox_forward)
    expected = getattr(blackbox_forward, "input_shape", None)
    if expected is not None and tuple(expected) != tuple(G.output_shape):
        raise ShapeError(f"black box expects {tuple(expected)}, key encoder emits {G.output_shape}")
    out = D.forward(fwd(G.forward(_key_array(key))))
    return out[0] if np.ndim(getattr(key, "vector", key)) == 1 else out


def _evaluate(G, D, M, key, m, eval_keys):
    keys = np.concatenate([_key_array(key), eval_keys])
    ext = D.forward(M.forward(G.forward(keys)))
    scores = ncc_batch(ext, m)
    return float(scores[0]), float(scores[1:].mean())


def encode(G: Network, D: Network, M: ProtectedModelHandle, k: Key, m, config: TrainConfig | None = None) -> TrainedPipeline:
    """Jointly train ``G`` and ``D`` so that ``D(M(G(k)))`` reproduces ``m``.

    Each step uses the correct key, freshly drawn wrong keys and a batch of
    normal queries.  Stops early once the correct-key NCC reaches ``ncc_hi``
    and the mean NCC over ``eval_wrong_keys`` fixed wrong keys is at most
    ``ncc_lo``; otherwise returns with ``converged=False`` after ``epochs_max``.
    """
    cfg = config or TrainConfig()
    mark = _mark_array(m)
    if mark.shape != tuple(M.output_shape):
        raise ShapeError(f"mark shape {mark.shape} != protected output shape {M.output_shape}")
    if G.output_shape != tuple(M.input_shape) or D.input_shape != tuple(M.output_shape):
        raise ShapeError("key encoder / decoder shapes do not close over the protected model")
    if k.dim != G.input_shape[0]:
        raise ShapeError(f"key length {k.dim} != encoder input {G.input_shape[0]}")

    t0 = time.perf_counter()
    digest_start = M.digest()
    rng = np.random.default_rng(cfg.seed)
    sampler = QuerySampler(M.modality, cfg.seed + 1, cfg.query_pool, M.output_shape if M.modality == "I2I" else None)
    eval_keys = np.stack(
        [sample_wrong_key(k, np.random.default_rng([cfg.seed, 99, i])).vector for i in range(cfg.eval_wrong_keys)]
    )
    opt_g = Adam(G.parameters(), lr=cfg.lr)
    opt_d = Adam(D.parameters(), lr=cfg.lr)
    n_key = cfg.key_replicas
    history: list[dict] = []
    converged = False

    for epoch in range(1, cfg.epochs_max + 1):
        sums = np.zeros(3)
        for _ in range(cfg.steps_per_epoch):
            wrong = [sample_wrong_key(k, rng).vector for _ in range(cfg.wrong_keys_per_step)]
            keys = np.stack([k.vector] * n_key + wrong)
            x = sampler(cfg.queries_per_step)

            gk, g_tape = G.forward_with_tape(keys)
            mk, pullback = M.input_vjp(gk)
            if cfg.key_noise > 0 and n_key > 1:
                # replicas after the first see M's key output under additive noise
                sig = rng.uniform(0.0, cfg.key_noise, size=(n_key - 1, 1, 1, 1))
                mk = mk.copy()
                mk[1:n_key] += (sig * rng.standard_normal(mk[1:n_key].shape)).astype(DTYPE)
            mx = M.forward(x)
            out, d_tape = D.forward_with_tape(np.concatenate([mk, mx]))

            n_keys = len(keys)
            l_k, dy_k = _batch_terms(out[:n_key], mark, cfg.eps, reciprocal=False)
            l_w, dy_w = _batch_terms(out[n_key:n_keys], mark, cfg.eps, reciprocal=True)
            l_x, dy_x = _batch_terms(out[n_keys:], mark, cfg.eps, reciprocal=True)
            total = l_k + l_w + l_x
            try:
                check_loss(total)
            except FloatingPointError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}", log=history) from None

            d_in, d_grads = D.backward(d_tape, np.concatenate([dy_k, dy_w, dy_x]), need_input_grad=True)
            _, g_grads = G.backward(g_tape, pullback(d_in[:n_keys]), need_input_grad=False)
            opt_g.step(g_grads)
            opt_d.step(d_grads)
            sums += (l_k, l_w, l_x)

        ncc_ok, ncc_wrong = _evaluate(G, D, M, k, mark, eval_keys)
        means = sums / cfg.steps_per_epoch
        row = {
            "epoch": epoch,
            "L_k": float(means[0]),
            "L_wrongk": float(means[1]),
            "L_x": float(means[2]),
            "ncc_correct": ncc_ok,
            "ncc_wrong_mean": ncc_wrong,
        }
        history.append(row)
        log.debug("epoch %d %s", epoch, row)
        if ncc_ok >= cfg.ncc_hi and ncc_wrong <= cfg.ncc_lo:
            converged = True
            break

    digest_end = M.digest()
    if digest_end != digest_start:
        raise RuntimeError("protected model parameters changed during encode")
    return TrainedPipeline(
        G=G,
        D=D,
        protected=M,
        mark=mark,
        key_digest=k.digest,
        watermark_digest=getattr(m, "digest", lambda: forge.WatermarkImage(mark, "text").digest())(),
        log=history,
        converged=converged,
        protected_digest_start=digest_start,
        protected_digest_end=digest_end,
        config=asdict(cfg),
        elapsed_s=time.perf_counter() - t0,
    )


def random_key_batch(key_dim: int, n: int, seed: int) -> np.ndarray:
    return keygen_batch(key_dim, n, np.random.default_rng(seed))
