"""Convergence diagnostics for MCMC chains and the MCMC-EM log-likelihood trace."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq
from scipy.special import gamma, kv

from .sampler import ChainSet

__all__ = [
    "ChainDiagnostics",
    "StationarityResult",
    "psrf",
    "ess",
    "check_chains",
    "check_batch",
    "heidelberger_welch",
    "cramer_von_mises_cdf",
    "cvm_critical_value",
    "PSRF_THRESHOLD",
    "ESS_THRESHOLD",
]

PSRF_THRESHOLD = 1.1
ESS_THRESHOLD = 100.0
ESS_CAP = 1.25
CVM_TERMS = 50


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim < 2:
        raise ValueError("chains must have shape (m, N, ...)")
    return x


def psrf(chains) -> np.ndarray | float:
    """Gelman-Rubin potential scale reduction factor per scalar coordinate.

    ``chains`` has shape ``(m, N)`` or ``(m, N, ...)``; trailing axes are
    treated as independent coordinates.
    """
    x = _as_chains(chains)
    m, n = x.shape[:2]
    if m < 2 or n < 2:
        raise ValueError("psrf needs at least 2 chains of length 2")
    w = x.var(axis=1, ddof=1).mean(axis=0)
    b = n * x.mean(axis=1).var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(((n - 1) / n * w + b / n) / w)
    r = np.where(w > 0, r, np.where(b > 0, np.inf, 1.0))
    return float(r) if r.ndim == 0 else r


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance along axis 1 via FFT."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=1)
    return np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n] / n


def ess(chains) -> np.ndarray | float:
    """Effective sample size per scalar coordinate.

    Autocorrelations come from the chain-averaged autocovariance normalized by
    the pooled variance estimate used by :func:`psrf`; the sum is truncated with
    Geyer's initial monotone positive sequence.  The result lies in
    ``(0, 1.25 * m * N]``.
    """
    x = _as_chains(chains)
    m, n = x.shape[:2]
    if n < 4:
        raise ValueError("ess needs chains of length >= 4")
    total = m * n
    w = x.var(axis=1, ddof=1).mean(axis=0)
    b_over_n = x.mean(axis=1).var(axis=0, ddof=1) if m > 1 else np.zeros_like(w)
    var_plus = (n - 1) / n * w + b_over_n
    acov = _autocov(x).mean(axis=0)
    zero = ~(var_plus > 0)
    safe = np.where(zero, 1.0, var_plus)
    rho = 1.0 - (w - acov) / safe
    n_pairs = n // 2
    pairs = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    keep = np.cumprod(pairs > 0, axis=0).astype(bool)
    mono = np.minimum.accumulate(np.where(keep, pairs, np.inf), axis=0)
    tau = -1.0 + 2.0 * np.sum(np.where(keep, mono, 0.0), axis=0)
    tau = np.maximum(tau, 1.0 / ESS_CAP)
    out = np.where(zero, float(total), total / tau)
    return float(out) if out.ndim == 0 else out


@dataclass
class ChainDiagnostics:
    psrf: np.ndarray
    ess: np.ndarray
    passed: bool


def check_chains(chains: ChainSet | np.ndarray) -> ChainDiagnostics:
    """Apply both chain criteria to every coordinate of the latent matrix."""
    draws = chains.flat() if isinstance(chains, ChainSet) else np.asarray(chains, dtype=float)
    if draws.ndim == 2:
        draws = draws[..., None]
    draws = draws.reshape(draws.shape[0], draws.shape[1], -1)
    r = np.atleast_1d(psrf(draws))
    e = np.atleast_1d(ess(draws))
    passed = bool(np.max(r) < PSRF_THRESHOLD and np.min(e) > ESS_THRESHOLD)
    return ChainDiagnostics(r, e, passed)


def check_batch(draws: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chain criteria for a batch of shape (B, chains, N, d).

    Returns per-item max psrf, min ess and the pass flag.
    """
    x = np.moveaxis(np.asarray(draws, dtype=float), 0, 2)
    r = np.asarray(psrf(x)).reshape(x.shape[2], -1).max(axis=1)
    e = np.asarray(ess(x)).reshape(x.shape[2], -1).min(axis=1)
    return r, e, (r < PSRF_THRESHOLD) & (e > ESS_THRESHOLD)


def cramer_von_mises_cdf(q: float, eps: float = 1e-5) -> float:
    """Limiting distribution function of the Cramer-von Mises statistic."""
    if q <= 0:
        return 0.0
    total = 0.0
    # the usual 4-term truncation loses accuracy (and monotonicity) for q > 2
    for k in range(CVM_TERMS):
        u = (4 * k + 1) ** 2 / (16.0 * q)
        if u > -math.log(eps):
            break
        z = gamma(k + 0.5) * math.sqrt(4 * k + 1) / (gamma(k + 1) * math.pi**1.5 * math.sqrt(q))
        total += z * math.exp(-u) * kv(0.25, u)
    return float(total)


@lru_cache(maxsize=32)
def cvm_critical_value(alpha: float) -> float:
    """Upper ``alpha`` quantile of the limiting Cramer-von Mises distribution."""
    return float(brentq(lambda q: 1.0 - cramer_von_mises_cdf(q) - alpha, 0.01, 5.0, xtol=1e-12))


def _spectrum0_bartlett(y: np.ndarray) -> float:
    """Zero-frequency spectral density with a Bartlett window of lag floor(sqrt(L))."""
    n = y.size
    q = int(math.isqrt(n))
    yc = y - y.mean()
    s0 = float(yc @ yc) / n
    for k in range(1, min(q, n - 1) + 1):
        s0 += 2.0 * (1.0 - k / (q + 1.0)) * float(yc[:-k] @ yc[k:]) / n
    return max(s0, 0.0)


@dataclass
class StationarityResult:
    passed: bool
    cvm_statistic: float
    discarded_prefix_fraction: float
    p_value: float
    too_short: bool = False


def heidelberger_welch(series, alpha: float = 0.05) -> StationarityResult:
    """Stationarity part of the Heidelberger-Welch test.

    The Cramer-von Mises statistic of the Brownian-bridge functional of the
    cumulative sums is tested at level ``alpha``.  On failure the first 10%
    of the series is dropped and the test repeated, up to 50% dropped.  The
    long-run variance is estimated once, from the latter half of the series.
    """
    y_all = np.asarray(series, dtype=float).ravel()
    n = y_all.size
    if n < 10:
        return StationarityResult(False, float("nan"), 0.0, float("nan"), too_short=True)
    crit = cvm_critical_value(alpha)
    s0 = _spectrum0_bartlett(y_all[n // 2 :])
    stat, frac = float("nan"), 0.0
    for step in range(6):
        frac = step / 10.0
        y = y_all[int(math.floor(frac * n)) :]
        if y.size < 10:
            return StationarityResult(False, stat, frac, float("nan"), too_short=True)
        bridge = np.cumsum(y - y.mean())
        ss = float(bridge @ bridge)
        if s0 > 0:
            stat = ss / (y.size**2 * s0)
        else:
            stat = 0.0 if np.ptp(y) == 0 else float("inf")
        if stat < crit:
            return StationarityResult(True, stat, frac, 1.0 - cramer_von_mises_cdf(stat))
    p = 1.0 - cramer_von_mises_cdf(stat) if math.isfinite(stat) else 0.0
    return StationarityResult(False, stat, frac, p)
