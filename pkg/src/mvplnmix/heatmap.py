"""Per-cluster expression heatmaps written as standalone SVG files."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .tensor_io import CountTensor

__all__ = ["row_zscores", "diverging_color", "heatmap_svg", "emit_heatmaps"]

CELL_W = 40
CELL_H = 6
LABEL_H = 70
LABEL_W = 110
LIMIT = 2.5


def row_zscores(X) -> np.ndarray:
    """Row-standardized values; zero-variance rows map to 0 (mid-scale)."""
    X = np.asarray(X, dtype=float)
    mu = X.mean(axis=1, keepdims=True)
    sd = X.std(axis=1, keepdims=True)
    out = np.zeros_like(X)
    np.divide(X - mu, sd, out=out, where=sd > 0)
    return out


def diverging_color(v: float, limit: float = LIMIT) -> str:
    """Green for low, black for mid-scale, red for high."""
    t = float(np.clip(v / limit, -1.0, 1.0))
    red = int(round(255 * max(t, 0.0)))
    green = int(round(255 * max(-t, 0.0)))
    return f"#{red:02x}{green:02x}00"


def heatmap_svg(counts, sample_ids, unit_ids, title: str = "") -> str:
    """One heatmap: rows are units sorted by total count, cells are row z-scores of log(count + 1)."""
    counts = np.asarray(counts, dtype=float)
    order = np.argsort(-counts.sum(axis=1), kind="stable")
    Z = row_zscores(np.log1p(counts[order]))
    n, c = Z.shape
    width = LABEL_W + c * CELL_W + 10
    height = LABEL_H + n * CELL_H + 10
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{escape(title)}</title>',
        f'<text x="4" y="14" font-size="12" font-family="sans-serif">{escape(title)}</text>',
    ]
    for k, name in enumerate(sample_ids):
        x = LABEL_W + k * CELL_W + CELL_W / 2
        parts.append(
            f'<text x="{x:.1f}" y="{LABEL_H - 4}" font-size="9" font-family="sans-serif" '
            f'transform="rotate(-60 {x:.1f} {LABEL_H - 4})">{escape(str(name))}</text>'
        )
    for i in range(n):
        y = LABEL_H + i * CELL_H
        parts.append(f'<g><title>{escape(str(unit_ids[order[i]]))}</title>')
        for k in range(c):
            parts.append(
                f'<rect x="{LABEL_W + k * CELL_W}" y="{y}" width="{CELL_W}" height="{CELL_H}" '
                f'fill="{diverging_color(Z[i, k])}"/>'
            )
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_heatmaps(tensor: CountTensor, labels, out_dir) -> list[Path]:
    """Write ``cluster_<g>.svg`` for every cluster present in ``labels``."""
    labels = np.asarray(labels)
    if labels.shape != (tensor.n,):
        raise ValueError(f"expected {tensor.n} labels, got {labels.shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    X = tensor.as_matrix()
    paths = []
    for g in np.unique(labels):
        idx = np.flatnonzero(labels == g)
        path = out_dir / f"cluster_{int(g) + 1}.svg"
        title = f"Cluster {int(g) + 1} ({idx.size} units)"
        path.write_text(heatmap_svg(X[idx], tensor.sample_ids, [tensor.unit_ids[j] for j in idx], title))
        paths.append(path)
    return paths
