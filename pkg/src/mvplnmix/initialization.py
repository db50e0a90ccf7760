"""Initial responsibilities and component parameters.

k-means runs on ``log(count + 1)`` of the vectorized units.  Centroids are
seeded at distinct units chosen uniformly at random from a canonical unit
order (sorted unit ids), so a reordering of the input rows permutes the
labels and nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, DegenerateComponentError
from .matnorm import MatNormParams
from .mvpln import _log_s
from .tensor_io import CountTensor

__all__ = [
    "InitSpec",
    "lloyd",
    "kmeans_candidates",
    "kmeans_init",
    "random_init",
    "init_params",
    "best_of_runs",
    "initialize",
    "INIT_FLOOR",
]

INIT_FLOOR = 0.5
MAX_REPAIRS = 10
MAX_LLOYD_ITER = 300


@dataclass(frozen=True)
class InitSpec:
    method: str = "kmeans"
    runs: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("kmeans", "random"):
            raise ValueError(f"unknown init method {self.method!r}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")


def _run_rng(seed: int, run: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(run,)))


def lloyd(X: np.ndarray, G: int, rng: np.random.Generator, order=None) -> tuple[np.ndarray, float]:
    """One run of Lloyd's algorithm; returns hard labels and the within-cluster sum of squares.

    ``order`` is the canonical row order used for seeding, tie-breaking and
    label numbering (default: row order).
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if not 1 <= G <= n:
        raise ValueError(f"need 1 <= G <= n, got G={G}, n={n}")
    order = np.arange(n) if order is None else np.asarray(order)
    rank = np.empty(n, dtype=int)
    rank[order] = np.arange(n)
    Xc = X[order]
    centers = Xc[rng.choice(n, size=G, replace=False)].copy()
    labels = np.full(n, -1)
    repairs = 0
    for _ in range(MAX_LLOYD_ITER):
        d2 = ((Xc[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=G)
        if np.any(counts == 0):
            if repairs >= MAX_REPAIRS:
                raise DegenerateComponentError("k-means left a cluster empty after 10 repairs")
            own = d2[np.arange(n), new]
            for g in np.flatnonzero(counts == 0):
                far = int(np.argmax(own))
                centers[g] = Xc[far]
                own[far] = -1.0
            repairs += 1
            continue
        if np.array_equal(new, labels):
            break
        labels = new
        centers = np.stack([Xc[labels == g].mean(axis=0) for g in range(G)])
    wcss = float(sum(((Xc[labels == g] - centers[g]) ** 2).sum() for g in range(G)))
    # number clusters by first appearance in the canonical order
    _, first = np.unique(labels, return_index=True)
    relabel = np.empty(G, dtype=int)
    relabel[labels[np.sort(first)]] = np.arange(G)
    return relabel[labels][rank], wcss


def _features(tensor: CountTensor | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(tensor, CountTensor):
        return np.log1p(tensor.as_matrix().astype(float)), tensor.canonical_order()
    x = np.asarray(tensor, dtype=float)
    x = x.reshape(x.shape[0], -1)
    return np.log1p(x), np.arange(x.shape[0])


def kmeans_candidates(tensor, G: int, runs: int, seed: int) -> list[tuple[np.ndarray, float]]:
    """Independent k-means runs, each with its own derived seed."""
    X, order = _features(tensor)
    return [lloyd(X, G, _run_rng(seed, i), order) for i in range(runs)]


def kmeans_init(tensor, G: int, spec: InitSpec | None = None) -> np.ndarray:
    """Hard labels from the k-means run with the smallest within-cluster sum of squares."""
    spec = InitSpec() if spec is None else spec
    cands = kmeans_candidates(tensor, G, spec.runs, spec.seed)
    best = min(range(len(cands)), key=lambda i: (cands[i][1], i))
    return cands[best][0]


def random_init(n: int, G: int, rng: np.random.Generator) -> np.ndarray:
    """Rows drawn uniformly from the probability simplex."""
    if G < 1:
        raise ValueError("G must be >= 1")
    e = rng.exponential(size=(n, G))
    return e / e.sum(axis=1, keepdims=True)


def init_params(tensor: CountTensor, z, G: int, s=None) -> list[MatNormParams]:
    """``M_g = log(max(weighted mean count, 0.5))`` with identity covariances.

    With library sizes ``s`` the counts are first divided by them, so that
    ``M_g`` lives on the same scale as the latent log-means.
    """
    r, p = tensor.r, tensor.p
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        labels = z.astype(int)
        z = np.zeros((tensor.n, G))
        z[np.arange(tensor.n), labels] = 1.0
    order = tensor.canonical_order()
    z = z[order]
    n_g = z.sum(axis=0)
    if np.any(n_g < 1.0):
        raise DegenerateComponentError("an initial cluster has weight below one unit")
    Y = tensor.as_matrix()[order].astype(float)
    if s is not None:
        Y = Y / np.exp(_log_s(s, r, p).reshape(-1))
    means = (z.T @ Y) / n_g[:, None]
    M = np.log(np.maximum(means, INIT_FLOOR))
    return [MatNormParams(M[g].reshape(r, p), np.eye(r), np.eye(p)) for g in range(G)]


def best_of_runs(candidates: Sequence, evaluate: Callable[[object], float]) -> tuple[int, list[float]]:
    """Index of the candidate with the highest score (ties: lowest index) and all scores."""
    if not candidates:
        raise ValueError("no candidates")
    scores = [float(evaluate(c)) for c in candidates]
    best = 0
    for i, v in enumerate(scores):
        if v > scores[best]:
            best = i
    return best, scores


def _one_hot(labels, G):
    z = np.zeros((len(labels), G))
    z[np.arange(len(labels)), labels] = 1.0
    return z


def initialize(tensor: CountTensor, s, G: int, spec: InitSpec | None = None):
    """Candidate initializations scored by the Laplace log-likelihood at ``init_params``.

    Returns ``(z, components, info)`` where ``info`` records every run's score.
    """
    from .em import laplace_grid, m_step_pi, responsibilities

    spec = InitSpec() if spec is None else spec
    if G > tensor.n:
        raise DataError(f"cannot form {G} clusters from {tensor.n} units")
    if spec.method == "kmeans":
        cands = [_one_hot(lab, G) for lab, _ in kmeans_candidates(tensor, G, spec.runs, spec.seed)]
    else:
        cands = [random_init(tensor.n, G, _run_rng(spec.seed, i)) for i in range(spec.runs)]
    y = tensor.as_matrix().astype(float)
    log_s = _log_s(s, tensor.r, tensor.p).reshape(-1)

    def evaluate(z):
        if np.any(z.sum(axis=0) < 1.0):
            return -np.inf
        comps = init_params(tensor, z, G, s)
        return responsibilities(m_step_pi(z), laplace_grid(y, log_s, comps).loglik)[0]

    best, scores = best_of_runs(cands, evaluate)
    if not np.isfinite(scores[best]):
        raise DegenerateComponentError("every initialization run left a cluster empty")
    z = cands[best]
    return z, init_params(tensor, z, G, s), {"method": spec.method, "scores": scores, "chosen": best}
