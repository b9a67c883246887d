"""Shared, lazily built experiment fixtures and the acceptance summary.

Trained artifacts are written through the package's own checkpoint formats so
later tests load exactly what a user would.  Set ``SHADOWMARK_TEST_CACHE`` to
a directory to keep them between sessions.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from shadowmark import attacks, data, keys, train, zoo

PRETRAIN_EPOCHS = 50
KEY_SEED = 7
KEY_DIM = 256
G_SEED, D_SEED = 1, 2
QUERY_BUDGET = 2048
SURROGATE_EPOCHS = 20


@dataclass
class Lab:
    root: Path
    timings: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict)

    @property
    def key(self) -> keys.Key:
        return keys.keygen(KEY_DIM, seed=KEY_SEED)

    def protected(self, modality: str) -> zoo.ProtectedModelHandle:
        slot = ("M", modality)
        if slot not in self._cache:
            path = self.root / modality / "protected"
            if not (path / "manifest.json").exists():
                t0 = time.perf_counter()
                handle = zoo.pretrain_protected_model(modality, epochs=PRETRAIN_EPOCHS, seed=0)
                zoo.save_checkpoint(handle, path, extra={"task_error": handle.task_error})
                self.timings[f"pretrain {modality}"] = time.perf_counter() - t0
            self._cache[slot] = zoo.load_protected(path)
        return self._cache[slot]

    def pipeline_dir(self, modality: str, mark: str = "COPYRIGHT") -> Path:
        self.pipeline(modality, mark)
        return self.root / modality / f"pipeline-{mark}"

    def pipeline(self, modality: str, mark: str = "COPYRIGHT") -> train.TrainedPipeline:
        slot = ("P", modality, mark)
        if slot not in self._cache:
            M = self.protected(modality)
            path = self.root / modality / f"pipeline-{mark}"
            if not (path / "pipeline.json").exists():
                G = zoo.build_network("key-encoder", modality, KEY_DIM, seed=G_SEED)
                D = zoo.build_network("decoder", modality, seed=D_SEED)
                m = data.make_mark(mark, tuple(M.output_shape))
                train.encode(G, D, M, self.key, m, train.TrainConfig()).save(path)
            self._cache[slot] = train.TrainedPipeline.load(path, M)
        return self._cache[slot]

    def surrogate(self, modality: str = "I2I", mark: str = "COPYRIGHT") -> dict:
        """Distilled surrogate of the protected model plus its per-epoch transfer log."""
        slot = ("S", modality, mark)
        if slot not in self._cache:
            p = self.pipeline(modality, mark)
            path = self.root / modality / f"surrogate-{mark}"
            if not (path / "manifest.json").exists():
                t0 = time.perf_counter()
                ds = attacks.harvest_queries(p.protected, attacks.QueryBudget(QUERY_BUDGET, 11, modality))
                held = attacks.harvest_queries(p.protected, attacks.QueryBudget(128, 12, modality))
                res = attacks.train_surrogate(
                    ds, epochs=SURROGATE_EPOCHS, seed=13, pipeline=p, key=self.key, heldout=held
                )
                zoo.save_checkpoint(res.network, path, role="surrogate", modality=modality)
                meta = {"log": res.log, "heldout_mse": res.heldout_mse, "elapsed_s": time.perf_counter() - t0}
                (path / "surrogate.json").write_text(json.dumps(meta))
            meta = json.loads((path / "surrogate.json").read_text())
            self._cache[slot] = {"handle": zoo.load_blackbox(path), "path": path, **meta}
        return self._cache[slot]


@pytest.fixture(scope="session")
def lab(tmp_path_factory) -> Lab:
    root = os.environ.get("SHADOWMARK_TEST_CACHE")
    root = Path(root) if root else tmp_path_factory.mktemp("lab")
    root.mkdir(parents=True, exist_ok=True)
    return Lab(root)


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def record():
    """``record(n, passed, detail)`` registers one check under acceptance criterion ``n``."""

    def _record(n: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE.setdefault(n, []).append((bool(passed), detail))
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[n]
        ok = all(passed for passed, _ in checks)
        tr.write_line(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'}")
        for passed, detail in checks:
            tr.write_line(f"    [{'ok' if passed else 'FAIL'}] {detail}")
