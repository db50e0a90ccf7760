"""Three-way count data: loading, writing, vectorization and library sizes.

A unit's ``r x p`` count matrix is always flattened in row-major order, so
element ``(i, k)`` lands at index ``i * p + k``.  Every file format and every
downstream module relies on this single convention.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

__all__ = [
    "CountTensor",
    "LibrarySizes",
    "load_counts",
    "write_counts",
    "format_counts",
    "vectorize_unit",
    "devectorize_unit",
    "compute_library_sizes",
    "load_library_sizes",
    "write_library_sizes",
    "format_library_sizes",
]

SAMPLE_SEP = ":"


@dataclass(frozen=True)
class CountTensor:
    """An ``n x r x p`` array of non-negative integer counts plus labels."""

    counts: np.ndarray
    unit_ids: tuple[str, ...] = field(default=())
    occasion_ids: tuple[str, ...] = field(default=())
    variable_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 3:
            raise DataError(f"counts must be 3-dimensional, got shape {counts.shape}")
        n, r, p = counts.shape
        if min(n, r, p) < 1:
            raise DataError(f"all dimensions must be >= 1, got {counts.shape}")
        if not np.all(np.isfinite(counts)):
            raise DataError("counts contain non-finite values")
        if np.any(counts < 0):
            raise DataError("counts must be non-negative")
        if np.any(counts != np.round(counts)):
            raise DataError("counts must be integral")
        counts = counts.astype(np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

        defaults = {
            "unit_ids": [f"u{j + 1}" for j in range(n)],
            "occasion_ids": [f"O{i + 1}" for i in range(r)],
            "variable_ids": [f"V{k + 1}" for k in range(p)],
        }
        for name, size in (("unit_ids", n), ("occasion_ids", r), ("variable_ids", p)):
            labels = tuple(str(x) for x in getattr(self, name)) or tuple(defaults[name])
            if len(labels) != size:
                raise DataError(f"{name} has {len(labels)} labels, expected {size}")
            object.__setattr__(self, name, labels)
        if len(set(self.unit_ids)) != n:
            raise DataError("duplicate unit id")

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def r(self) -> int:
        return self.counts.shape[1]

    @property
    def p(self) -> int:
        return self.counts.shape[2]

    @property
    def sample_ids(self) -> list[str]:
        """Column names of the rp samples, in vectorization order."""
        return [f"{o}{SAMPLE_SEP}{v}" for o in self.occasion_ids for v in self.variable_ids]

    def as_matrix(self) -> np.ndarray:
        """The ``n x rp`` matrix of vectorized units."""
        return self.counts.reshape(self.n, self.r * self.p)

    def canonical_order(self) -> np.ndarray:
        """Row indices that sort the units by id.

        Reductions over units run in this order, so results do not depend on
        the order of the rows in the input file.
        """
        return np.argsort(np.array(self.unit_ids, dtype=object), kind="stable")

    def subset(self, index) -> "CountTensor":
        index = np.asarray(index)
        return CountTensor(
            self.counts[index],
            tuple(self.unit_ids[j] for j in index),
            self.occasion_ids,
            self.variable_ids,
        )


@dataclass(frozen=True)
class LibrarySizes:
    """Per-sample library size constants, one per vectorized sample."""

    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float).ravel()
        if s.size == 0:
            raise DataError("library sizes are empty")
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise DataError("library sizes must be finite and strictly positive")
        s.setflags(write=False)
        object.__setattr__(self, "s", s)

    @classmethod
    def ones(cls, r: int, p: int) -> "LibrarySizes":
        return cls(np.ones(r * p))

    @property
    def log(self) -> np.ndarray:
        return np.log(self.s)

    def check(self, r: int, p: int) -> None:
        if self.s.size != r * p:
            raise DataError(f"library sizes have length {self.s.size}, expected r*p = {r * p}")


def vectorize_unit(Y) -> np.ndarray:
    """Row-major stacking of an ``r x p`` matrix into a length ``rp`` vector."""
    Y = np.asarray(Y)
    if Y.ndim != 2:
        raise DataError(f"expected an r x p matrix, got shape {Y.shape}")
    return Y.reshape(-1).copy()


def devectorize_unit(v, r: int, p: int) -> np.ndarray:
    v = np.asarray(v)
    if v.shape != (r * p,):
        raise DataError(f"expected a vector of length {r * p}, got shape {v.shape}")
    return v.reshape(r, p).copy()


def _parse_sample_header(names: Sequence[str], r: int, p: int):
    """Recover occasion and variable labels from ``occ:var`` column names."""
    parts = [name.split(SAMPLE_SEP) for name in names]
    if not all(len(x) == 2 for x in parts):
        return (), ()
    occasions = [parts[i * p][0] for i in range(r)]
    variables = [parts[k][1] for k in range(p)]
    expected = [[o, v] for o in occasions for v in variables]
    if expected != parts or len(set(occasions)) != r or len(set(variables)) != p:
        return (), ()
    return tuple(occasions), tuple(variables)


def _parse_count(token: str, row: int, col: int) -> int:
    try:
        value = float(token)
    except ValueError:
        raise DataError(f"row {row}, column {col}: non-numeric count {token!r}") from None
    if not math.isfinite(value) or value != int(value):
        raise DataError(f"row {row}, column {col}: fractional count {token!r}")
    if value < 0:
        raise DataError(f"row {row}, column {col}: negative count {token!r}")
    return int(value)


def load_counts(path, r: int, p: int) -> CountTensor:
    """Read a count CSV: ``unit_id`` then ``r*p`` count columns per row."""
    if r < 1 or p < 1:
        raise DataError("r and p must be positive")
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path} is empty")
    header, body = rows[0], [row for row in rows[1:] if row]
    width = r * p + 1
    if len(header) != width:
        raise DataError(
            f"dimension mismatch: {len(header) - 1} count columns, expected r*p = {r * p}"
        )
    if not body:
        raise DataError(f"{path} has no data rows")
    unit_ids, values = [], []
    for j, row in enumerate(body, start=2):
        if len(row) != width:
            raise DataError(f"row {j}: {len(row) - 1} count columns, expected {r * p}")
        unit_ids.append(row[0])
        values.append([_parse_count(tok, j, c) for c, tok in enumerate(row[1:], start=2)])
    if len(set(unit_ids)) != len(unit_ids):
        seen, dup = set(), None
        for u in unit_ids:
            if u in seen:
                dup = u
                break
            seen.add(u)
        raise DataError(f"duplicate unit id {dup!r}")
    occasions, variables = _parse_sample_header(header[1:], r, p)
    counts = np.asarray(values, dtype=np.int64).reshape(len(body), r, p)
    return CountTensor(counts, tuple(unit_ids), occasions, variables)


def format_counts(tensor: CountTensor) -> str:
    """The count CSV as text: ``unit_id`` then one column per ``occ:var`` sample."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["unit_id", *tensor.sample_ids])
    for uid, row in zip(tensor.unit_ids, tensor.as_matrix()):
        writer.writerow([uid, *(int(x) for x in row)])
    return buf.getvalue()


def write_counts(tensor: CountTensor, path) -> None:
    Path(path).write_text(format_counts(tensor))


def format_library_sizes(sizes: LibrarySizes) -> str:
    return ",".join(repr(float(x)) for x in sizes.s) + "\n"


def write_library_sizes(sizes: LibrarySizes, path) -> None:
    Path(path).write_text(format_library_sizes(sizes))


def load_library_sizes(path) -> LibrarySizes:
    text = Path(path).read_text().strip()
    try:
        values = [float(tok) for tok in text.replace("\n", ",").split(",") if tok.strip()]
    except ValueError as exc:
        raise DataError(f"{path}: malformed library sizes ({exc})") from None
    return LibrarySizes(np.array(values))


def _geometric_normalize(x: np.ndarray) -> np.ndarray:
    return x / np.exp(np.mean(np.log(x)))


def _tmm_factor(obs, ref, lib_obs, lib_ref, trim_m=0.30, trim_a=0.05) -> float:
    """Weighted trimmed mean of log-ratios of ``obs`` against ``ref``."""
    obs = obs.astype(float)
    ref = ref.astype(float)
    keep = (obs > 0) & (ref > 0)
    obs, ref = obs[keep], ref[keep]
    if obs.size == 0:
        return 1.0
    po, pr = obs / lib_obs, ref / lib_ref
    log_r = np.log2(po / pr)
    abs_e = 0.5 * (np.log2(po) + np.log2(pr))
    var = (lib_obs - obs) / lib_obs / obs + (lib_ref - ref) / lib_ref / ref
    good = var > 0
    log_r, abs_e, var = log_r[good], abs_e[good], var[good]
    m = log_r.size
    if m == 0:
        return 1.0
    if np.max(np.abs(log_r - log_r[0])) < 1e-12:
        # every ratio identical: trimming cannot change the answer
        return float(2.0 ** log_r[0])
    lo_m = math.floor(m * trim_m) + 1
    hi_m = m + 1 - lo_m
    lo_a = math.floor(m * trim_a) + 1
    hi_a = m + 1 - lo_a
    rank_m = rankdata(log_r)
    rank_a = rankdata(abs_e)
    sel = (rank_m >= lo_m) & (rank_m <= hi_m) & (rank_a >= lo_a) & (rank_a <= hi_a)
    if not np.any(sel):
        return 1.0
    f = np.sum(log_r[sel] / var[sel]) / np.sum(1.0 / var[sel])
    return float(2.0**f)


def compute_library_sizes(tensor: CountTensor, method: str = "tmm") -> LibrarySizes:
    """Library sizes for the rp samples, with geometric mean 1.

    ``total-count`` divides each sample's column sum by the geometric mean of
    all column sums.  ``tmm`` further multiplies by trimmed-mean-of-M-values
    factors computed against the sample whose depth is closest to the mean.
    """
    X = tensor.as_matrix()
    depth = X.sum(axis=0).astype(float)
    if np.any(depth <= 0):
        bad = [tensor.sample_ids[c] for c in np.flatnonzero(depth <= 0)]
        raise DataError(f"all-zero sample column(s): {', '.join(bad)}")
    total = _geometric_normalize(depth)
    if method in ("total", "total-count"):
        return LibrarySizes(total)
    if method != "tmm":
        raise DataError(f"unknown normalization method {method!r}")
    ref = int(np.argmin(np.abs(depth - depth.mean())))
    factors = np.array(
        [_tmm_factor(X[:, c], X[:, ref], depth[c], depth[ref]) for c in range(X.shape[1])]
    )
    factors = _geometric_normalize(factors)
    return LibrarySizes(_geometric_normalize(total * factors))
