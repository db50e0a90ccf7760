"""Synthetic three-way count data from known MVPLN mixtures."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, SpecError
from .matnorm import MatNormParams
from .tensor_io import CountTensor, LibrarySizes

__all__ = [
    "SimSpec",
    "random_spd",
    "generate",
    "preset",
    "PRESETS",
    "write_labels",
    "format_labels",
    "read_labels",
]

MAX_LOG_MEAN = 700.0


def random_spd(dim: int, eigenvalue_range=(1.0, 10.0), rng: np.random.Generator | None = None) -> np.ndarray:
    """``Q diag(lambda) Q'`` with Haar-random ``Q`` and ``lambda`` uniform on the range."""
    lo, hi = (float(x) for x in eigenvalue_range)
    if not 0 < lo <= hi:
        raise SpecError("eigenvalue range must satisfy 0 < lo <= hi")
    rng = np.random.default_rng() if rng is None else rng
    lam = rng.uniform(lo, hi, size=dim)
    Q, R = np.linalg.qr(rng.standard_normal((dim, dim)))
    Q = Q * np.sign(np.diag(R))
    A = (Q * lam) @ Q.T
    return 0.5 * (A + A.T)


@dataclass(frozen=True)
class SimSpec:
    n: int
    pi: tuple[float, ...]
    components: tuple[MatNormParams, ...]
    library_sizes: LibrarySizes | None = None
    seed: int = 0
    diagonal_only: bool = False
    name: str = "custom"

    def __post_init__(self):
        comps = tuple(self.components)
        pi = tuple(float(x) for x in self.pi)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "pi", pi)
        if self.n < 1:
            raise SpecError("n must be >= 1")
        if len(pi) != len(comps) or not comps:
            raise SpecError("pi and components must have the same non-zero length")
        if min(pi) < 0 or abs(sum(pi) - 1.0) > 1e-10:
            raise SpecError("pi must lie on the simplex")
        shapes = {c.M.shape for c in comps}
        if len(shapes) != 1:
            raise SpecError("components disagree on (r, p)")
        if self.library_sizes is not None:
            self.library_sizes.check(self.r, self.p)
        if self.diagonal_only:
            for c in comps:
                for A in (c.Phi, c.Omega):
                    if np.any(A[~np.eye(A.shape[0], dtype=bool)] != 0):
                        raise SpecError("diagonal_only spec has non-zero off-diagonal covariance")

    @property
    def G(self) -> int:
        return len(self.components)

    @property
    def r(self) -> int:
        return self.components[0].r

    @property
    def p(self) -> int:
        return self.components[0].p

    def with_(self, **kw) -> "SimSpec":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "r": self.r,
            "p": self.p,
            "G": self.G,
            "pi": list(self.pi),
            "components": [c.to_dict() for c in self.components],
            "library_sizes": None if self.library_sizes is None else self.library_sizes.s.tolist(),
            "seed": self.seed,
            "diagonal_only": self.diagonal_only,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimSpec":
        s = d.get("library_sizes")
        return cls(
            n=int(d["n"]),
            pi=tuple(d["pi"]),
            components=tuple(MatNormParams.from_dict(c) for c in d["components"]),
            library_sizes=None if s is None else LibrarySizes(np.array(s)),
            seed=int(d.get("seed", 0)),
            diagonal_only=bool(d.get("diagonal_only", False)),
            name=d.get("name", "custom"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def generate(spec: SimSpec) -> tuple[CountTensor, np.ndarray]:
    """Draw labels, latent matrices and Poisson counts; deterministic given ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    n, r, p = spec.n, spec.r, spec.p
    labels = rng.choice(spec.G, size=n, p=np.asarray(spec.pi))
    theta = np.empty((n, r, p))
    for g, c in enumerate(spec.components):
        idx = np.flatnonzero(labels == g)
        if idx.size:
            Z = rng.standard_normal((idx.size, r, p))
            theta[idx] = c.M + c.chol_phi @ Z @ c.chol_omega.T
    log_s = 0.0 if spec.library_sizes is None else spec.library_sizes.log.reshape(r, p)
    eta = theta + log_s
    if np.max(eta) > MAX_LOG_MEAN:
        raise SpecError(f"Poisson log-mean {np.max(eta):.1f} exceeds {MAX_LOG_MEAN}")
    counts = rng.poisson(np.exp(eta))
    return CountTensor(counts), labels


def _sym(a):
    return np.array(a, dtype=float)


_OMEGA_SIM1 = _sym([[1.66, -0.61, 0.77], [-0.61, 1.46, 0.17], [0.77, 0.17, 1.44]])


def _sim1(n):
    M = np.array([[6.0, 5.5, 6.0], [6.0, 5.5, 6.0]])
    phi = _sym([[1.0, -0.55], [-0.55, 1.27]])
    return SimSpec(n, (1.0,), (MatNormParams(M, phi, _OMEGA_SIM1),), name="sim1")


def _sim2(n):
    c1 = MatNormParams(np.full((2, 3), 6.0), _sym([[1.0, -0.62], [-0.62, 1.4]]), _OMEGA_SIM1)
    c2 = MatNormParams(
        np.full((2, 3), 1.0),
        _sym([[1.0, 0.57], [0.57, 0.7]]),
        _sym([[0.7, -0.56, 0.39], [-0.56, 0.7, -0.39], [0.39, -0.39, 0.7]]),
    )
    return SimSpec(n, (0.79, 0.21), (c1, c2), name="sim2")


def _sim3(n):
    c1 = MatNormParams(np.full((2, 3), 6.2), np.eye(2), np.diag([1.66, 1.46, 1.44]))
    c2 = MatNormParams(np.full((2, 3), 1.5), np.diag([1.0, 0.7]), np.diag([0.75, 0.82, 0.9]))
    return SimSpec(n, (0.6, 0.4), (c1, c2), diagonal_only=True, name="sim3")


PRESETS = {"sim1": _sim1, "sim2": _sim2, "sim3": _sim3}


def preset(name: str, n: int = 1000, seed: int = 0) -> SimSpec:
    """One of the three reference simulation settings."""
    try:
        build = PRESETS[name]
    except KeyError:
        raise SpecError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return build(n).with_(seed=seed)


def format_labels(labels, unit_ids=None) -> str:
    """Labels CSV text; zero-based labels are written as clusters 1..G."""
    labels = np.asarray(labels)
    unit_ids = unit_ids or [f"u{j + 1}" for j in range(labels.size)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["unit_id", "label"])
    for uid, lab in zip(unit_ids, labels):
        writer.writerow([uid, int(lab) + 1])
    return buf.getvalue()


def write_labels(labels, path, unit_ids=None) -> None:
    Path(path).write_text(format_labels(labels, unit_ids))


def read_labels(path) -> tuple[list[str], np.ndarray]:
    """Unit ids and zero-based labels from a labels CSV."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["unit_id", "label"]:
        raise DataError(f"{path} is not a labels file")
    body = [row for row in rows[1:] if row]
    try:
        labels = np.array([int(row[1]) - 1 for row in body])
    except (ValueError, IndexError):
        raise DataError(f"{path}: malformed label") from None
    return [row[0] for row in body], labels
