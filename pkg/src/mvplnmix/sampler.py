"""Hamiltonian Monte Carlo for the latent log-means of one unit and one component.

Chains run in whitened coordinates ``u`` with ``theta = mode + D R u``: ``D``
holds per-unit scales from the diagonal of the negated log-posterior Hessian at
its mode and ``R`` is a correlation factor shared by all units of a component.
This is plain HMC with a fixed mass matrix ``(D R)^-T (D R)^-1``.  The step size is tuned by dual
averaging during warmup and jittered uniformly in [0.5, 1.5] of its nominal
value on every iteration so that fixed-length trajectories on near-Gaussian
targets do not resonate.

Every (unit, component, chain) owns an independent random stream derived from
a root seed and a key tuple, so the random numbers a chain consumes never
depend on which other chains share its batch.  The shared correlation factor
does depend on the batch; it is averaged in an order-independent way.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .errors import SamplerError
from .matnorm import MatNormParams
from .mvpln import _log_s, laplace_batch

__all__ = [
    "ChainConfig",
    "ChainSet",
    "BatchChains",
    "grow",
    "posterior_mean",
    "sample_latent",
    "sample_batch",
    "write_chain_dump",
    "read_chain_dump",
]

MIN_ACCEPTANCE = 0.05
_BLOCK = 100

# dual-averaging constants (Hoffman & Gelman defaults)
_GAMMA = 0.05
_T0 = 10.0
_KAPPA = 0.75


@dataclass(frozen=True)
class ChainConfig:
    n_chains: int = 3
    n_iter: int = 1000
    warmup_fraction: float = 0.5
    step_size: float = 1.0
    n_leapfrog: int = 10
    increment: int = 100
    target_accept: float = 0.8

    def __post_init__(self):
        if self.n_chains < 2:
            raise ValueError("n_chains must be >= 2")
        if self.n_iter < 1 or self.n_leapfrog < 0 or self.increment < 1:
            raise ValueError("n_iter and increment must be positive, n_leapfrog non-negative")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.n_retained < 1:
            raise ValueError("configuration retains no draws")

    @property
    def n_warmup(self) -> int:
        return int(round(self.n_iter * self.warmup_fraction))

    @property
    def n_retained(self) -> int:
        return self.n_iter - self.n_warmup


def grow(config: ChainConfig) -> ChainConfig:
    """Lengthen each chain by one increment."""
    return replace(config, n_iter=config.n_iter + config.increment)


@dataclass
class ChainSet:
    """Retained draws of one latent matrix: ``draws`` has shape (chains, N, r, p)."""

    draws: np.ndarray
    acceptance: np.ndarray
    step_size: np.ndarray
    config: ChainConfig

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_retained(self) -> int:
        return self.draws.shape[1]

    def flat(self) -> np.ndarray:
        """Draws as (chains, N, rp) in row-major vec order."""
        c, n = self.draws.shape[:2]
        return self.draws.reshape(c, n, -1)


def posterior_mean(chains: ChainSet) -> np.ndarray:
    """Average over every retained draw of every chain."""
    return chains.draws.mean(axis=(0, 1))


@dataclass
class BatchChains:
    """Retained draws for a batch: ``draws`` is (B, chains, N, d)."""

    draws: np.ndarray
    acceptance: np.ndarray
    step_size: np.ndarray

    def chainset(self, b: int, r: int, p: int, config: ChainConfig) -> ChainSet:
        c, n = self.draws.shape[1:3]
        return ChainSet(
            self.draws[b].reshape(c, n, r, p), self.acceptance[b], self.step_size[b], config
        )


def _stream(root, key: Sequence[int]) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(root, spawn_key=tuple(int(k) for k in key)))


def _shared_factor(chol: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-item diagonal scales and one shared correlation factor.

    For negated Hessians ``H_b = chol_b chol_b'``, returns ``scale`` (B, d) with
    ``scale_b = diag(H_b)^-1/2`` and ``R`` (d, d) with ``R R' = Cbar^-1``, where
    ``Cbar`` averages the correlation matrices ``D_b H_b D_b``.
    """
    H = chol @ np.transpose(chol, (0, 2, 1))
    scale = 1.0 / np.sqrt(np.diagonal(H, axis1=1, axis2=2))
    corr = H * scale[:, :, None] * scale[:, None, :]
    # sorting first makes the average independent of the order of the items
    corr = np.sort(corr, axis=0).mean(axis=0)
    corr = 0.5 * (corr + corr.T)
    R = np.linalg.inv(np.linalg.cholesky(corr)).T
    return scale, R


def sample_batch(
    y,
    log_s,
    m,
    P,
    mode,
    chol,
    config: ChainConfig,
    root_seed: int,
    keys: Sequence[Sequence[int]],
    *,
    groups=None,
    prior_only: bool = False,
    check_acceptance: bool = True,
) -> BatchChains:
    """Run ``config.n_chains`` HMC chains for each of ``B`` latent posteriors.

    Parameters
    ----------
    y : (B, d) counts; ignored when ``prior_only``.
    log_s : (d,) log library sizes.
    m : (B, d) prior means.
    P : (G, d, d) prior precisions, one per group.
    mode, chol : (B, d) posterior modes and (B, d, d) lower Cholesky factors of
        the negated Hessian at the mode.
    keys : B key tuples; chain ``c`` of item ``b`` uses stream ``keys[b] + (c,)``.
    groups : (B,) group index of each item into ``P`` (default: all zero).
    check_acceptance : raise :class:`SamplerError` when any chain's post-warmup
        acceptance falls below 0.05.  Callers that retry failing items turn this off.

    Items sharing a group share a prior precision and a correlation
    preconditioner, which keeps every leapfrog step down to dense products
    with small shared matrices.
    """
    m = np.asarray(m, dtype=float)
    B, d = m.shape
    P = np.asarray(P, dtype=float).reshape(-1, d, d)
    groups = np.zeros(B, dtype=int) if groups is None else np.asarray(groups, dtype=int)
    if len(keys) != B or groups.shape != (B,):
        raise ValueError("one key and one group per batch item are required")
    C = config.n_chains
    # group-contiguous item order so that every shared product acts on a view
    order = np.argsort(groups, kind="stable")
    groups = groups[order]
    chol = np.asarray(chol, dtype=float)[order]
    mode = np.asarray(mode, dtype=float)[order]
    m = m[order]
    keys = [keys[b] for b in order]
    item = np.repeat(np.arange(B), C)
    K = B * C

    slices = []
    scale = np.empty((K, d))
    for g in np.unique(groups):
        members = np.flatnonzero(groups == g)
        sc, R = _shared_factor(chol[members])
        rows = slice(members[0] * C, (members[-1] + 1) * C)
        scale[rows] = np.repeat(sc, C, axis=0)
        slices.append((rows, np.ascontiguousarray(R.T), np.ascontiguousarray(R), P[g]))

    mode_k = mode[item]
    m_k = m[item]
    log_s = np.broadcast_to(np.asarray(log_s, dtype=float), (d,))
    yk = np.zeros((K, d)) if prior_only else np.asarray(y, dtype=float)[order][item]

    def shared(x, which, out):
        for sl in slices:
            np.matmul(x[sl[0]], sl[which], out=out[sl[0]])
        return out

    log_s_k = np.ascontiguousarray(np.broadcast_to(log_s, (K, d)))
    ones = np.ones(d)
    dev, Pdev, resid, quad, tmp = (np.empty((K, d)) for _ in range(5))

    def logp_grad(u, theta, grad, lp):
        """Log target and whitened gradient at ``u``, written into the output buffers."""
        shared(u, 1, theta)
        np.multiply(theta, scale, out=theta)
        np.add(theta, mode_k, out=theta)
        np.subtract(theta, m_k, out=dev)
        shared(dev, 3, Pdev)
        np.multiply(dev, Pdev, out=quad)
        np.multiply(quad, -0.5, out=quad)
        if prior_only:
            np.negative(Pdev, out=resid)
        else:
            np.add(theta, log_s_k, out=resid)
            np.exp(resid, out=resid)
            np.subtract(quad, resid, out=quad)
            np.multiply(yk, theta, out=dev)
            np.add(quad, dev, out=quad)
            np.subtract(yk, resid, out=resid)
            np.subtract(resid, Pdev, out=resid)
        np.matmul(quad, ones, out=lp)
        np.multiply(resid, scale, out=resid)
        shared(resid, 2, grad)

    streams = [_stream(root_seed, (*keys[b], c)) for b in range(B) for c in range(C)]
    u = np.stack([s.standard_normal(d) for s in streams])
    theta, g, lp = np.empty((K, d)), np.empty((K, d)), np.empty(K)
    logp_grad(u, theta, g, lp)
    u_new, theta_new, g_new, lp_new = np.empty((K, d)), np.empty((K, d)), np.empty((K, d)), np.empty(K)
    p = np.empty((K, d))
    kin = np.empty(K)

    n_warm = config.n_warmup
    N = config.n_retained
    L = config.n_leapfrog
    draws = np.empty((N, K, d))
    accept_sum = np.zeros(K)

    log_eps = np.full(K, np.log(config.step_size))
    mu_da = np.log(10.0 * config.step_size)
    h_bar = np.zeros(K)
    log_eps_bar = np.zeros(K)

    with np.errstate(over="ignore", invalid="ignore"):
        for start in range(0, config.n_iter, _BLOCK):
            width = min(_BLOCK, config.n_iter - start)
            block = np.stack([s.standard_normal((_BLOCK, d + 2)) for s in streams], axis=1)
            for t in range(width):
                it = start + t
                rnd = block[t]
                mom = rnd[:, :d]
                log_unif = np.log(ndtr(rnd[:, d]))
                if L == 0:
                    alpha = np.ones(K)
                else:
                    eps = (np.exp(log_eps) * (0.5 + ndtr(rnd[:, d + 1])))[:, None]
                    half = 0.5 * eps
                    np.multiply(half, g, out=p)
                    p += mom
                    u_new[...] = u
                    for step in range(L):
                        np.multiply(eps, p, out=tmp)
                        u_new += tmp
                        logp_grad(u_new, theta_new, g_new, lp_new)
                        np.multiply(eps if step < L - 1 else half, g_new, out=tmp)
                        p += tmp
                    np.multiply(p, p, out=tmp)
                    tmp -= mom * mom
                    np.matmul(tmp, ones, out=kin)
                    log_ratio = (lp_new - lp) - 0.5 * kin
                    log_ratio[~np.isfinite(log_ratio)] = -np.inf
                    alpha = np.exp(np.minimum(log_ratio, 0.0))
                    acc = log_unif < log_ratio
                    acc2 = acc[:, None]
                    np.copyto(u, u_new, where=acc2)
                    np.copyto(g, g_new, where=acc2)
                    np.copyto(theta, theta_new, where=acc2)
                    np.copyto(lp, lp_new, where=acc)
                if it < n_warm:
                    w = it + 1
                    h_bar = (1.0 - 1.0 / (w + _T0)) * h_bar + (
                        config.target_accept - alpha
                    ) / (w + _T0)
                    log_eps = np.minimum(mu_da - np.sqrt(w) / _GAMMA * h_bar, np.log(1e3))
                    wk = w**-_KAPPA
                    log_eps_bar = wk * log_eps + (1.0 - wk) * log_eps_bar
                    if it == n_warm - 1:
                        log_eps = log_eps_bar
                else:
                    draws[it - n_warm] = theta
                    accept_sum += alpha

    acceptance = accept_sum / N
    if check_acceptance and L > 0 and np.any(acceptance < MIN_ACCEPTANCE):
        worst = float(acceptance.min())
        raise SamplerError(f"HMC acceptance collapsed to {worst:.3f} after adaptation")
    inverse = np.argsort(order)
    return BatchChains(
        np.transpose(draws, (1, 0, 2)).reshape(B, C, N, d)[inverse],
        acceptance.reshape(B, C)[inverse],
        np.exp(log_eps).reshape(B, C)[inverse],
    )


def sample_latent(
    Y,
    s,
    params: MatNormParams,
    config: ChainConfig,
    seed: int,
    *,
    key: Sequence[int] = (),
    prior_only: bool = False,
) -> ChainSet:
    """Sample the latent matrix of one unit under one component's parameters."""
    r, p = params.r, params.p
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape != (r, p):
        raise ValueError(f"Y has shape {Y.shape}, expected {(r, p)}")
    log_s = _log_s(s, r, p).reshape(-1)
    m = params.M.reshape(1, -1)
    P = params.precision()[None]
    lap = laplace_batch(Y.reshape(1, -1), log_s, m, P, params.logdet_sigma(), prior_only=prior_only)
    batch = sample_batch(
        Y.reshape(1, -1), log_s, m, P, lap.mode, lap.chol, config, seed, [tuple(key)],
        prior_only=prior_only,
    )
    return batch.chainset(0, r, p, config)


def write_chain_dump(chains: ChainSet, path) -> None:
    """CSV with columns ``chain, iteration`` then the rp vectorized latent values."""
    flat = chains.flat()
    d = flat.shape[2]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["chain", "iteration", *(f"theta{c + 1}" for c in range(d))])
        for c in range(flat.shape[0]):
            for k in range(flat.shape[1]):
                writer.writerow([c, k, *(repr(float(x)) for x in flat[c, k])])


def read_chain_dump(path) -> np.ndarray:
    """Load a chain dump as an array of shape (chains, N, rp)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or rows[0][:2] != ["chain", "iteration"]:
        raise ValueError(f"{path} is not a chain dump")
    data = np.array([[float(x) for x in row] for row in rows[1:] if row])
    chain = data[:, 0].astype(int)
    ids = np.unique(chain)
    per = [data[chain == c, 2:] for c in ids]
    lengths = {len(x) for x in per}
    if len(lengths) != 1:
        raise ValueError(f"{path}: chains have unequal lengths")
    return np.stack(per)
