"""Matrix variate Poisson-log normal layer.

Latent log posterior and its gradient, the per-unit marginal likelihood
(Laplace approximation, with a prior Monte Carlo estimator kept as an
oracle), and the closed-form unconditional moments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ConvergenceError
from .matnorm import MatNormParams, log_density
from .tensor_io import LibrarySizes

__all__ = [
    "MomentPair",
    "LaplaceResult",
    "latent_log_posterior",
    "latent_log_posterior_grad",
    "latent_neg_hessian",
    "laplace_batch",
    "unit_log_likelihood",
    "mc_prior_log_likelihood",
    "mvpln_moments",
]

NEWTON_MAX_ITER = 100
NEWTON_TOL = 1e-8
NEWTON_DECREMENT = 1e-10


def _log_s(s, r: int, p: int) -> np.ndarray:
    if s is None:
        return np.zeros((r, p))
    if isinstance(s, LibrarySizes):
        s.check(r, p)
        return s.log.reshape(r, p)
    s = np.asarray(s, dtype=float)
    if s.size != r * p:
        raise ValueError(f"library sizes have length {s.size}, expected {r * p}")
    return np.log(s).reshape(r, p)


def _prep(theta, Y, params):
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if theta.shape != params.M.shape or Y.shape != params.M.shape:
        raise ValueError(
            f"theta {theta.shape} and Y {Y.shape} must both have shape {params.M.shape}"
        )
    return theta, Y


def latent_log_posterior(theta, Y, s, params: MatNormParams) -> float:
    """Unnormalized log posterior of ``theta`` given counts ``Y`` (log Y! omitted)."""
    theta, Y = _prep(theta, Y, params)
    eta = theta + _log_s(s, params.r, params.p)
    return float(np.sum(Y * eta - np.exp(eta))) + log_density(theta, params)


def latent_log_posterior_grad(theta, Y, s, params: MatNormParams) -> np.ndarray:
    """``Y - exp(theta + log S) - Phi^-1 (theta - M) Omega^-1``."""
    theta, Y = _prep(theta, Y, params)
    eta = theta + _log_s(s, params.r, params.p)
    return Y - np.exp(eta) - params.phi_inv() @ (theta - params.M) @ params.omega_inv()


def latent_neg_hessian(theta, s, params: MatNormParams) -> np.ndarray:
    """Negated Hessian of the log posterior in row-major vec coordinates."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    mu = np.exp(theta + _log_s(s, params.r, params.p)).reshape(-1)
    return np.diag(mu) + params.precision()


@dataclass
class LaplaceResult:
    """Batched Laplace fit: posterior modes, Cholesky of ``-Hessian`` and log-likelihoods.

    All arrays are in row-major vec coordinates; leading axis is the batch.
    """

    mode: np.ndarray
    chol: np.ndarray
    loglik: np.ndarray
    iterations: int


def _objective(theta, y, log_s, m, P, prior_only):
    dev = theta - m
    quad = np.einsum("bi,bij,bj->b", dev, P, dev)
    if prior_only:
        return -0.5 * quad
    with np.errstate(over="ignore", invalid="ignore"):
        eta = theta + log_s
        val = np.sum(y * eta - np.exp(eta), axis=1) - 0.5 * quad
    return np.where(np.isfinite(val), val, -np.inf)


def laplace_batch(
    y,
    log_s,
    m,
    P,
    logdet_sigma,
    theta0=None,
    *,
    prior_only: bool = False,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
) -> LaplaceResult:
    """Newton-optimize a batch of latent posteriors and apply the Laplace approximation.

    Parameters
    ----------
    y : (B, d) counts (ignored when ``prior_only``).
    log_s : (d,) or (B, d) log library sizes.
    m : (B, d) prior means.
    P : (B, d, d) prior precisions.
    logdet_sigma : (B,) log-determinants of the prior covariances.
    theta0 : optional (B, d) starting points.
    """
    m = np.asarray(m, dtype=float)
    B, d = m.shape
    P = np.broadcast_to(np.asarray(P, dtype=float), (B, d, d))
    log_s = np.broadcast_to(np.asarray(log_s, dtype=float), (B, d))
    if prior_only or y is None:
        y = np.zeros((B, d))
    else:
        y = np.broadcast_to(np.asarray(y, dtype=float), (B, d))
    logdet_sigma = np.broadcast_to(np.asarray(logdet_sigma, dtype=float), (B,))

    if theta0 is None:
        theta = m.copy() if prior_only else np.log(y + 0.5) - log_s
    else:
        theta = np.array(theta0, dtype=float, copy=True)
    f = _objective(theta, y, log_s, m, P, prior_only)
    if not np.all(np.isfinite(f)):
        bad = ~np.isfinite(f)
        theta[bad] = m[bad]
        f = _objective(theta, y, log_s, m, P, prior_only)

    eye = np.eye(d)
    it = 0
    for it in range(1, max_iter + 1):
        mu = np.zeros((B, d)) if prior_only else np.exp(theta + log_s)
        grad = y - mu - np.einsum("bij,bj->bi", P, theta - m)
        gmax = np.max(np.abs(grad), axis=1)
        active = gmax >= tol
        if not active.any():
            break
        idx = np.flatnonzero(active)
        H = P[idx] + mu[idx, :, None] * eye
        step = np.linalg.solve(H, grad[idx][..., None])[..., 0]
        quadratic = np.sum(grad[idx] * step, axis=1) < NEWTON_DECREMENT
        t = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        for _ in range(60):
            sub = np.flatnonzero(pending)
            cand = theta[idx[sub]] + t[sub, None] * step[sub]
            fc = _objective(cand, y[idx[sub]], log_s[idx[sub]], m[idx[sub]], P[idx[sub]], prior_only)
            # inside the quadratic region the full step is taken: f then moves
            # by less than the rounding error of its summands
            ok = (fc >= f[idx[sub]]) | (quadratic[sub] & (t[sub] == 1.0))
            accepted = sub[ok]
            theta[idx[accepted]] = cand[ok]
            f[idx[accepted]] = fc[ok]
            pending[accepted] = False
            if not pending.any():
                break
            t[pending] *= 0.5
        if pending.any():
            # no ascent along the Newton direction: only acceptable at the optimum
            stalled = idx[pending]
            scale = 1.0 + np.max(np.abs(y[stalled]), axis=1) + np.max(np.abs(mu[stalled]), axis=1)
            if np.any(gmax[stalled] > 1e-6 * scale):
                raise ConvergenceError("Newton line search stalled away from the mode")
            if pending.all():
                break
    else:
        raise ConvergenceError(f"Newton did not converge in {max_iter} iterations")

    mu = np.zeros((B, d)) if prior_only else np.exp(theta + log_s)
    H = P + mu[:, :, None] * eye
    chol = np.linalg.cholesky(H)
    logdet_h = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    const = 0.0 if prior_only else np.sum(gammaln(y + 1.0), axis=1)
    loglik = f - const - 0.5 * logdet_sigma - 0.5 * logdet_h
    return LaplaceResult(theta, chol, loglik, it)


def unit_log_likelihood(
    Y,
    s,
    params: MatNormParams,
    method: str = "laplace",
    *,
    n_draws: int = 100_000,
    rng: np.random.Generator | None = None,
) -> float:
    """Approximate log of the MVPLN marginal probability of one unit's counts."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape != params.M.shape:
        raise ValueError(f"Y has shape {Y.shape}, expected {params.M.shape}")
    if method == "laplace":
        res = laplace_batch(
            Y.reshape(1, -1),
            _log_s(s, params.r, params.p).reshape(-1),
            params.M.reshape(1, -1),
            params.precision()[None],
            params.logdet_sigma(),
        )
        return float(res.loglik[0])
    if method == "mc-prior":
        rng = np.random.default_rng() if rng is None else rng
        return mc_prior_log_likelihood(Y, s, params, n_draws, rng)[0]
    raise ValueError(f"unknown method {method!r}")


def mc_prior_log_likelihood(
    Y, s, params: MatNormParams, n_draws: int, rng: np.random.Generator, chunk: int = 200_000
) -> tuple[float, float]:
    """Prior Monte Carlo estimate of the log marginal likelihood and its standard error."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    y = Y.reshape(-1)
    log_s = _log_s(s, params.r, params.p).reshape(-1)
    L = np.linalg.cholesky(params.covariance())
    m = params.M.reshape(-1)
    const = np.sum(gammaln(y + 1.0))
    logs = []
    done = 0
    while done < n_draws:
        k = min(chunk, n_draws - done)
        theta = m + rng.standard_normal((k, y.size)) @ L.T
        eta = theta + log_s
        logs.append(eta @ y - np.exp(eta).sum(axis=1) - const)
        done += k
    logs = np.concatenate(logs)
    top = logs.max()
    w = np.exp(logs - top)
    mean_w = w.mean()
    se = w.std(ddof=1) / np.sqrt(n_draws) / mean_w
    return float(top + np.log(mean_w)), float(se)


@dataclass(frozen=True)
class MomentPair:
    mean: np.ndarray
    variance: np.ndarray


def mvpln_moments(params: MatNormParams) -> MomentPair:
    """Unconditional mean and variance of each count (unit library sizes)."""
    v = np.outer(np.diag(params.Phi), np.diag(params.Omega))
    mean = np.exp(params.M + 0.5 * v)
    return MomentPair(mean, mean + mean**2 * np.expm1(v))


def log_marginal_pmf_terms(y) -> np.ndarray:
    """``sum_c log(y_c!)`` per row, the constant dropped by the latent posterior."""
    return np.sum(gammaln(np.asarray(y, dtype=float) + 1.0), axis=-1)


def mixture_log_likelihood(log_pi, unit_ll) -> tuple[float, np.ndarray]:
    """Observed log-likelihood and log responsibilities from per-component unit terms."""
    joint = np.asarray(unit_ll) + np.asarray(log_pi)[None, :]
    norm = logsumexp(joint, axis=1)
    return float(norm.sum()), joint - norm[:, None]

