"""Qualitative grid of every intermediate in the key and query paths (owner-local artifact)."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

GRID_COLUMNS = (
    "m",
    "G(k)",
    "M(G(k))",
    "D(M(G(k)))",
    "G(k~)",
    "M(G(k~))",
    "D(M(G(k~)))",
    "x",
    "M(x)",
    "D(M(x))",
)


def _as_picture(a: np.ndarray) -> np.ndarray:
    """2-D display array: images lose the channel axis, vectors fold into a near-square."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        return a[0] if a.shape[0] == 1 else np.moveaxis(a, 0, -1)
    flat = a.ravel()
    side = math.ceil(math.sqrt(flat.size))
    pad = np.full(side * side, np.nan)
    pad[: flat.size] = flat
    return pad.reshape(side, side)


def grid_panels(pipeline, key, wrong_keys: np.ndarray, queries: np.ndarray) -> list[list[np.ndarray]]:
    """Rows of the ten panels in :data:`GRID_COLUMNS` order."""
    G, D, M = pipeline.G, pipeline.D, pipeline.protected
    gk = G.forward(key.vector[None])
    mk = M.forward(gk)
    dk = D.forward(mk)
    gw = G.forward(wrong_keys)
    mw = M.forward(gw)
    dw = D.forward(mw)
    mx = M.forward(queries)
    dx = D.forward(mx)
    rows = []
    for i in range(len(wrong_keys)):
        rows.append(
            [pipeline.mark, gk[0], mk[0], dk[0], gw[i], mw[i], dw[i], queries[i], mx[i], dx[i]]
        )
    return rows


def qualitative_grid(pipeline, key, wrong_keys: np.ndarray, queries: np.ndarray, path) -> Path:
    """Write a PNG with one row per (wrong key, query) pair and ten columns."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if len(wrong_keys) != len(queries) or len(queries) < 1:
        raise ValueError("need equally many (>= 1) wrong keys and queries")
    rows = grid_panels(pipeline, key, wrong_keys, queries)
    fig, axes = plt.subplots(len(rows), len(GRID_COLUMNS), figsize=(1.5 * len(GRID_COLUMNS), 1.6 * len(rows)), squeeze=False)
    for r, row in enumerate(rows):
        for c, panel in enumerate(row):
            ax = axes[r][c]
            pic = _as_picture(panel)
            is_vector = np.ndim(panel) == 1
            vmin, vmax = (np.nanmin(pic), np.nanmax(pic)) if is_vector else (0.0, 1.0)
            ax.imshow(np.clip(pic, vmin, vmax) if not is_vector else pic, cmap="gray", vmin=vmin, vmax=vmax)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(GRID_COLUMNS[c], fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
