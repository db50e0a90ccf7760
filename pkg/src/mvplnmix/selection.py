"""Free-parameter counts, information criteria, model choice and the adjusted Rand index."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

__all__ = [
    "CRITERIA",
    "count_free_params",
    "criteria",
    "select",
    "ari",
    "SelectionRow",
    "SelectionTable",
]

CRITERIA = ("aic", "bic", "aic3", "icl")


def count_free_params(G: int, r: int, p: int, family: str = "mvpln") -> int:
    """Number of free parameters of a G-component mixture.

    ``mvpln``: (G-1) + Grp + G[r(r+1) + p(p+1)]/2.
    ``mpln``: (G-1) + Grp + Grp(rp+1)/2 (unstructured rp x rp covariance).
    """
    if min(G, r, p) < 1:
        raise ValueError("G, r and p must be >= 1")
    base = (G - 1) + G * r * p
    if family == "mvpln":
        return base + G * (r * (r + 1) + p * (p + 1)) // 2
    if family == "mpln":
        return base + G * r * p * (r * p + 1) // 2
    raise ValueError(f"unknown family {family!r}")


def criteria(loglik: float, K: int, n: int, z) -> tuple[float, float, float, float]:
    """AIC, BIC, AIC3 and ICL; all are minimized.

    ICL adds ``2 * sum_j log z_j,MAP`` to BIC, where MAP is the argmax
    component of row ``j`` (ties to the smallest index).
    """
    if n < 1 or not math.isfinite(loglik):
        raise ValueError("need n >= 1 and a finite log-likelihood")
    z = np.asarray(z, dtype=float)
    aic = -2.0 * loglik + 2.0 * K
    bic = -2.0 * loglik + K * math.log(n)
    aic3 = -2.0 * loglik + 3.0 * K
    zmax = z[np.arange(z.shape[0]), np.argmax(z, axis=1)]
    with np.errstate(divide="ignore"):
        term = float(np.sum(np.log(zmax)))
    return aic, bic, aic3, bic + 2.0 * term


def select(rows) -> dict[str, int]:
    """Per criterion, the G with the smallest value among converged rows (ties: smaller G)."""
    ok = sorted((r for r in rows if r.converged), key=lambda r: r.G)
    if not ok:
        raise ValueError("no converged fits to select from")
    out = {}
    for c in CRITERIA:
        best = ok[0]
        for row in ok[1:]:
            if getattr(row, c) < getattr(best, c):
                best = row
        out[c] = best.G
    return out


def _pairs(counts) -> int:
    return sum(math.comb(int(c), 2) for c in np.ravel(counts))


def ari(labels_a, labels_b) -> float:
    """Hubert-Arabie adjusted Rand index."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("label vectors must be 1-d and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two labels")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    sum_ij = _pairs(table)
    sum_a = _pairs(table.sum(axis=1))
    sum_b = _pairs(table.sum(axis=0))
    expected = Fraction(sum_a * sum_b, math.comb(n, 2))
    max_index = Fraction(sum_a + sum_b, 2)
    if max_index == expected:
        # only when both partitions are a single block or both all singletons
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


@dataclass
class SelectionRow:
    G: int
    K: int
    final_loglik: float = float("nan")
    aic: float = float("nan")
    bic: float = float("nan")
    aic3: float = float("nan")
    icl: float = float("nan")
    converged: bool = False
    n_outer_iterations: int = 0
    ari: float | None = None
    error: str | None = None


@dataclass
class SelectionTable:
    rows: list[SelectionRow]
    chosen: dict[str, int] = field(default_factory=dict)

    @classmethod
    def build(cls, rows: list[SelectionRow]) -> "SelectionTable":
        rows = sorted(rows, key=lambda r: r.G)
        try:
            chosen = select(rows)
        except ValueError:
            chosen = {}
        return cls(rows, chosen)

    COLUMNS = (
        "G", "K", "final_loglik", "aic", "bic", "aic3", "icl",
        "converged", "n_outer_iterations", "ari", "error",
    )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for row in self.rows:
            vals = []
            for c in self.COLUMNS:
                v = getattr(row, c)
                if isinstance(v, float):
                    v = repr(v)
                elif v is None:
                    v = ""
                vals.append(v)
            writer.writerow(vals)
        return buf.getvalue()

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v

        return {
            "rows": [{c: clean(getattr(r, c)) for c in self.COLUMNS} for r in self.rows],
            "chosen": self.chosen,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def format(self) -> str:
        lines = [f"{'G':>3} {'K':>5} {'loglik':>14} {'AIC':>14} {'BIC':>14} {'AIC3':>14} {'ICL':>14}  status"]
        for r in self.rows:
            status = "converged" if r.converged else (f"failed: {r.error}" if r.error else "not converged")
            lines.append(
                f"{r.G:>3} {r.K:>5} {r.final_loglik:>14.3f} {r.aic:>14.3f} {r.bic:>14.3f} "
                f"{r.aic3:>14.3f} {r.icl:>14.3f}  {status}"
            )
        if self.chosen:
            lines.append("chosen: " + ", ".join(f"{c.upper()}={g}" for c, g in self.chosen.items()))
        return "\n".join(lines)
