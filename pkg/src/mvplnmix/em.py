"""MCMC-EM for finite mixtures of matrix variate Poisson-log normal distributions.

Each outer iteration samples the latent matrices of every (unit, component)
pair that carries weight, updates the parameters in closed form from the
Monte Carlo moments of those draws, and recomputes the observed
log-likelihood and responsibilities with the Laplace approximation.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diagnostics import check_batch, heidelberger_welch
from .errors import DegenerateComponentError, NotPositiveDefiniteError, SamplerError
from .matnorm import LOG_2PI, MatNormParams, cholesky
from .mvpln import _log_s, laplace_batch, mixture_log_likelihood
from .sampler import MIN_ACCEPTANCE, ChainConfig, grow, sample_batch
from .tensor_io import CountTensor

__all__ = [
    "EMConfig",
    "UnitMoments",
    "LaplaceGrid",
    "MixtureFit",
    "laplace_grid",
    "responsibilities",
    "e_step",
    "m_step_pi",
    "m_step_mean",
    "m_step_phi",
    "m_step_omega",
    "m_step",
    "normalize_identifiability",
    "q_surrogate",
    "fit_mixture",
    "hard_labels",
]


@dataclass(frozen=True)
class EMConfig:
    """Outer-loop settings.

    ``z_floor``: pairs whose responsibility is below this value are not
    sampled; their weight in the mean and covariance updates is dropped.
    """

    chain: ChainConfig = field(default_factory=ChainConfig)
    max_outer: int = 200
    min_trace: int = 10
    alpha: float = 0.05
    max_retries: int = 5
    z_floor: float = 1e-6
    grow_each_iteration: bool = True

    def __post_init__(self):
        if self.max_outer < 1 or self.min_trace < 10 or self.max_retries < 0:
            raise ValueError("invalid EM configuration")
        if not 0.0 <= self.z_floor < 1.0:
            raise ValueError("z_floor must lie in [0, 1)")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "chain"}
        out["chain"] = {k: getattr(self.chain, k) for k in self.chain.__dataclass_fields__}
        return out


@dataclass
class UnitMoments:
    """Monte Carlo posterior moments of the vectorized latent matrices.

    ``mean`` is (n, G, d), ``cov`` is (n, G, d, d) and ``sampled`` (n, G)
    marks the pairs that were actually sampled.
    """

    mean: np.ndarray
    cov: np.ndarray
    sampled: np.ndarray

    @classmethod
    def from_draws(cls, draws) -> "UnitMoments":
        """Moments from raw draws of shape (n, G, K, d) or (n, K, d)."""
        x = np.asarray(draws, dtype=float)
        if x.ndim == 3:
            x = x[:, None]
        mean = x.mean(axis=2)
        dev = x - mean[:, :, None, :]
        cov = np.einsum("ngki,ngkl->ngil", dev, dev) / x.shape[2]
        return cls(mean, cov, np.ones(mean.shape[:2], dtype=bool))


@dataclass
class LaplaceGrid:
    """Laplace fits for every (unit, component) pair."""

    mode: np.ndarray  # (n, G, d)
    chol: np.ndarray  # (n, G, d, d)
    loglik: np.ndarray  # (n, G)


def _vec_counts(tensor: CountTensor | np.ndarray) -> np.ndarray:
    if isinstance(tensor, CountTensor):
        return tensor.as_matrix().astype(float)
    y = np.asarray(tensor, dtype=float)
    return y.reshape(y.shape[0], -1)


def laplace_grid(y, log_s, components: Sequence[MatNormParams], theta0=None) -> LaplaceGrid:
    """Batched Laplace approximation for all units under all components."""
    y = np.asarray(y, dtype=float)
    n, d = y.shape
    G = len(components)
    m = np.stack([c.M.reshape(-1) for c in components])
    P = np.stack([c.precision() for c in components])
    ld = np.array([c.logdet_sigma() for c in components])
    yy = np.repeat(y, G, axis=0)
    res = laplace_batch(
        yy,
        log_s,
        np.tile(m, (n, 1)),
        np.tile(P, (n, 1, 1)),
        np.tile(ld, n),
        None if theta0 is None else np.asarray(theta0).reshape(n * G, d),
    )
    return LaplaceGrid(
        res.mode.reshape(n, G, d), res.chol.reshape(n, G, d, d), res.loglik.reshape(n, G)
    )


def responsibilities(pi, unit_ll) -> tuple[float, np.ndarray]:
    """Observed log-likelihood and normalized responsibilities."""
    with np.errstate(divide="ignore"):
        total, log_z = mixture_log_likelihood(np.log(np.asarray(pi, dtype=float)), unit_ll)
    z = np.exp(log_z)
    return total, z / z.sum(axis=1, keepdims=True)


def hard_labels(z) -> np.ndarray:
    """MAP component per row; ``argmax`` resolves ties to the smallest index."""
    return np.argmax(np.asarray(z), axis=1)


def _unit_key(uid: str) -> int:
    return zlib.crc32(uid.encode("utf-8"))


@dataclass
class EStepResult:
    moments: UnitMoments
    summary: dict


def e_step(
    tensor: CountTensor,
    s,
    components: Sequence[MatNormParams],
    weights,
    chain_config: ChainConfig,
    seed: int,
    *,
    laplace: LaplaceGrid | None = None,
    iteration: int = 0,
    max_retries: int = 5,
    z_floor: float = 1e-6,
) -> EStepResult:
    """Sample every weighted (unit, component) pair and summarize the draws.

    Pairs failing the chain diagnostics are resampled with longer chains
    (one increment per attempt, up to ``max_retries`` attempts).  Pairs that
    still fail after the last attempt are kept and counted in the summary.
    """
    y = _vec_counts(tensor)
    n, d = y.shape
    G = len(components)
    log_s = _log_s(s, tensor.r, tensor.p).reshape(-1)
    if laplace is None:
        laplace = laplace_grid(y, log_s, components)
    weights = np.asarray(weights, dtype=float)
    sampled = weights >= z_floor if z_floor > 0 else np.ones((n, G), dtype=bool)
    sampled &= weights > 0
    jj, gg = np.nonzero(sampled)
    m = np.stack([c.M.reshape(-1) for c in components])
    P = np.stack([c.precision() for c in components])
    ukeys = [_unit_key(u) for u in tensor.unit_ids]

    mean = np.zeros((n, G, d))
    cov = np.zeros((n, G, d, d))
    max_psrf = np.full((n, G), np.nan)
    min_ess = np.full((n, G), np.nan)
    todo = np.arange(jj.size)
    config = chain_config
    n_first_fail = 0
    attempts = 0
    for attempt in range(max_retries + 1):
        attempts = attempt + 1
        j, g = jj[todo], gg[todo]
        keys = [(iteration, attempt, int(gi), ukeys[ji]) for ji, gi in zip(j, g)]
        batch = sample_batch(
            y[j], log_s, m[g], P, laplace.mode[j, g], laplace.chol[j, g], config, seed, keys,
            groups=g, check_acceptance=False,
        )
        r_hat, ess_min, ok = check_batch(batch.draws)
        ok &= np.all(batch.acceptance >= MIN_ACCEPTANCE, axis=1)
        draws = batch.draws.reshape(todo.size, -1, d)
        mu = draws.mean(axis=1)
        dev = draws - mu[:, None, :]
        mean[j, g] = mu
        cov[j, g] = np.matmul(np.transpose(dev, (0, 2, 1)), dev) / draws.shape[1]
        max_psrf[j, g] = r_hat
        min_ess[j, g] = ess_min
        if attempt == 0:
            n_first_fail = int(np.count_nonzero(~ok))
        last_acc = batch.acceptance
        todo = todo[~ok]
        if todo.size == 0:
            break
        config = grow(config)
    if todo.size and np.any(last_acc[~ok] < MIN_ACCEPTANCE):
        worst = float(last_acc.min())
        raise SamplerError(f"HMC acceptance collapsed to {worst:.3f} after adaptation")
    summary = {
        "iteration": iteration,
        "chain_iterations": chain_config.n_iter,
        "pairs_sampled": int(jj.size),
        "failed_first_pass": n_first_fail,
        "attempts": attempts,
        "failed_final": int(todo.size),
        "max_psrf": float(np.nanmax(max_psrf)) if jj.size else float("nan"),
        "min_ess": float(np.nanmin(min_ess)) if jj.size else float("nan"),
    }
    return EStepResult(UnitMoments(mean, cov, sampled), summary)


def m_step_pi(z) -> np.ndarray:
    """Mixing proportions ``n_g / n``."""
    z = np.asarray(z, dtype=float)
    return z.sum(axis=0) / z.shape[0]


def _effective_weights(z, moments: UnitMoments) -> np.ndarray:
    w = np.asarray(z, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    return np.where(moments.sampled, w, 0.0)


def m_step_mean(z, moments: UnitMoments, r: int, p: int) -> list[np.ndarray]:
    """Responsibility-weighted average of the posterior means, one ``r x p`` matrix per component."""
    w = _effective_weights(z, moments)
    n_g = w.sum(axis=0)
    if np.any(n_g <= 0):
        raise DegenerateComponentError("component with zero total weight in the mean update")
    M = np.einsum("ng,ngd->gd", w, moments.mean) / n_g[:, None]
    return [row.reshape(r, p) for row in M]


def _second_moments(w, moments: UnitMoments, M) -> np.ndarray:
    """``sum_j w_jg E[vec(theta - M) vec(theta - M)']`` as (G, d, d)."""
    mu = np.stack([np.asarray(x, dtype=float).reshape(-1) for x in M])
    shift = moments.mean - mu[None]
    return np.einsum("ng,ngil->gil", w, moments.cov) + np.einsum(
        "ng,ngi,ngl->gil", w, shift, shift
    )


def _symmetric(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def _checked(A: np.ndarray, name: str) -> np.ndarray:
    cholesky(A, name)
    return A


def m_step_phi(z, moments: UnitMoments, M, Omega, r: int, p: int) -> list[np.ndarray]:
    """Row covariance update ``sum_j z E[(theta - M) Omega^-1 (theta - M)'] / (p n_g)``."""
    w = _effective_weights(z, moments)
    n_g = w.sum(axis=0)
    S = _second_moments(w, moments, M).reshape(-1, r, p, r, p)
    out = []
    for g, om in enumerate(Omega):
        oinv = np.linalg.inv(np.asarray(om, dtype=float))
        phi = _symmetric(np.einsum("ikml,kl->im", S[g], oinv) / (p * n_g[g]))
        out.append(_checked(phi, f"Phi of component {g + 1}"))
    return out


def m_step_omega(z, moments: UnitMoments, M, Phi, r: int, p: int) -> list[np.ndarray]:
    """Column covariance update ``sum_j z E[(theta - M)' Phi^-1 (theta - M)] / (r n_g)``."""
    w = _effective_weights(z, moments)
    n_g = w.sum(axis=0)
    S = _second_moments(w, moments, M).reshape(-1, r, p, r, p)
    out = []
    for g, ph in enumerate(Phi):
        pinv = np.linalg.inv(np.asarray(ph, dtype=float))
        om = _symmetric(np.einsum("ikml,im->kl", S[g], pinv) / (r * n_g[g]))
        out.append(_checked(om, f"Omega of component {g + 1}"))
    return out


def m_step(
    z, moments: UnitMoments, components: Sequence[MatNormParams], r: int, p: int
) -> tuple[np.ndarray, list[MatNormParams]]:
    """All four updates in order: pi, M, Phi (given the old Omega), Omega (given the new Phi)."""
    n_g = np.asarray(z, dtype=float).sum(axis=0)
    if np.any(n_g < 1.0):
        g = int(np.argmin(n_g))
        raise DegenerateComponentError(f"component {g + 1} has fewer than one unit of weight")
    M = m_step_mean(z, moments, r, p)
    Phi = m_step_phi(z, moments, M, [c.Omega for c in components], r, p)
    Omega = m_step_omega(z, moments, M, Phi, r, p)
    return m_step_pi(z), [MatNormParams(Mg, Pg, Og) for Mg, Pg, Og in zip(M, Phi, Omega)]


def normalize_identifiability(Phi, Omega) -> tuple[np.ndarray, np.ndarray]:
    """Rescale so that ``Phi[0, 0] == 1`` while keeping ``Phi (x) Omega`` fixed."""
    Phi = np.asarray(Phi, dtype=float)
    Omega = np.asarray(Omega, dtype=float)
    a = Phi[0, 0]
    if not a > 0:
        raise NotPositiveDefiniteError("Phi[0, 0] must be positive")
    phi = Phi / a
    phi[0, 0] = 1.0
    return phi, Omega * a


def q_surrogate(z, moments: UnitMoments, pi, components: Sequence[MatNormParams]) -> float:
    """Parameter-dependent part of the expected complete-data log-likelihood.

    The Poisson terms do not involve the parameters and are left out; the
    latent normal terms are evaluated exactly from the Monte Carlo moments.
    """
    w = _effective_weights(z, moments)
    total = 0.0
    with np.errstate(divide="ignore"):
        log_pi = np.log(np.asarray(pi, dtype=float))
    S = _second_moments(w, moments, [c.M for c in components])
    for g, c in enumerate(components):
        d = c.r * c.p
        n_g = w[:, g].sum()
        quad = float(np.sum(c.precision() * S[g]))
        if n_g > 0:
            total += n_g * log_pi[g]
        total += -0.5 * n_g * (d * LOG_2PI + c.logdet_sigma()) - 0.5 * quad
    return total


@dataclass
class MixtureFit:
    G: int
    pi: np.ndarray
    components: list[MatNormParams]
    z: np.ndarray
    loglik_trace: list[float]
    final_loglik: float
    n_outer_iterations: int
    converged: bool
    diagnostics_history: list[dict]
    stationarity: dict | None = None
    unit_ids: tuple[str, ...] = ()

    @property
    def hard_labels(self) -> np.ndarray:
        return hard_labels(self.z)

    def to_dict(self) -> dict:
        return {
            "G": self.G,
            "pi": [float(x) for x in self.pi],
            "components": [c.to_dict() for c in self.components],
            "z": np.asarray(self.z).tolist(),
            "hard_labels": [int(x) for x in self.hard_labels],
            "loglik_trace": [float(x) for x in self.loglik_trace],
            "final_loglik": float(self.final_loglik),
            "n_outer_iterations": self.n_outer_iterations,
            "converged": bool(self.converged),
            "stationarity": self.stationarity,
            "diagnostics_history": self.diagnostics_history,
            "unit_ids": list(self.unit_ids),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureFit":
        return cls(
            G=int(d["G"]),
            pi=np.array(d["pi"], dtype=float),
            components=[MatNormParams.from_dict(c) for c in d["components"]],
            z=np.array(d["z"], dtype=float),
            loglik_trace=list(d["loglik_trace"]),
            final_loglik=float(d["final_loglik"]),
            n_outer_iterations=int(d["n_outer_iterations"]),
            converged=bool(d["converged"]),
            diagnostics_history=list(d.get("diagnostics_history", [])),
            stationarity=d.get("stationarity"),
            unit_ids=tuple(d.get("unit_ids", ())),
        )


def _as_responsibilities(init, n: int, G: int) -> np.ndarray:
    init = np.asarray(init)
    if init.ndim == 1:
        if init.shape[0] != n or init.min() < 0 or init.max() >= G:
            raise ValueError("initial labels must be n integers in [0, G)")
        z = np.zeros((n, G))
        z[np.arange(n), init.astype(int)] = 1.0
        return z
    if init.shape != (n, G):
        raise ValueError(f"initial responsibilities have shape {init.shape}, expected {(n, G)}")
    return init.astype(float)


def _finalize(pi, components, z, G):
    comps = []
    for c in components:
        phi, om = normalize_identifiability(c.Phi, c.Omega)
        comps.append(MatNormParams(c.M, phi, om))
    order = sorted(range(G), key=lambda g: (comps[g].M[0, 0], g))
    return np.asarray(pi)[order], [comps[g] for g in order], np.asarray(z)[:, order]


def fit_mixture(
    tensor: CountTensor,
    s,
    G: int,
    init,
    config: EMConfig | None = None,
    seed: int = 0,
    *,
    init_components: Sequence[MatNormParams] | None = None,
) -> MixtureFit:
    """Fit a G-component MVPLN mixture by MCMC-EM.

    Parameters
    ----------
    tensor : the count data.
    s : library sizes (``None`` for all ones).
    G : number of components.
    init : initial hard labels (length n) or responsibilities (n x G).
    config : outer-loop settings.
    seed : root seed; every chain's stream is derived from it and the
        (iteration, attempt, component, unit id, chain) key.
    init_components : starting parameters; by default the log of the
        cluster-wise mean counts with identity covariances.

    Returns
    -------
    MixtureFit
        Components are normalized so that ``Phi[0, 0] == 1`` and sorted by
        ``M[0, 0]``.  ``converged`` is false when the outer cap was reached.
    """
    from .initialization import init_params

    config = EMConfig() if config is None else config
    if G < 1:
        raise ValueError("G must be >= 1")
    # work in canonical unit order so that every sum over units, and hence
    # every chain, is the same however the input rows are ordered
    order = tensor.canonical_order()
    unit_ids = tensor.unit_ids
    tensor = tensor.subset(order)
    y = _vec_counts(tensor)
    n = y.shape[0]
    r, p = tensor.r, tensor.p
    log_s = _log_s(s, r, p).reshape(-1)
    z = _as_responsibilities(init, n, G)[order]
    if np.any(z.sum(axis=0) < 1.0):
        raise DegenerateComponentError("an initial cluster has fewer than one unit of weight")
    if init_components is None:
        components = init_params(tensor, z, G, s)
    else:
        components = list(init_components)
    pi = m_step_pi(z)

    lap = laplace_grid(y, log_s, components)
    trace: list[float] = []
    history: list[dict] = []
    chain = config.chain
    converged = False
    stationarity = None
    t = 0
    for t in range(1, config.max_outer + 1):
        est = e_step(
            tensor, s, components, z, chain, seed,
            laplace=lap, iteration=t, max_retries=config.max_retries, z_floor=config.z_floor,
        )
        pi, components = m_step(z, est.moments, components, r, p)
        lap = laplace_grid(y, log_s, components, theta0=lap.mode)
        ll, z = responsibilities(pi, lap.loglik)
        trace.append(ll)
        est.summary["loglik"] = ll
        history.append(est.summary)
        if len(trace) >= config.min_trace:
            hw = heidelberger_welch(trace, config.alpha)
            stationarity = {
                "passed": hw.passed,
                "cvm_statistic": hw.cvm_statistic,
                "discarded_prefix_fraction": hw.discarded_prefix_fraction,
            }
            if hw.passed:
                converged = True
                break
        if config.grow_each_iteration:
            chain = grow(chain)

    pi, components, z = _finalize(pi, components, z, G)
    return MixtureFit(
        G=G,
        pi=pi,
        components=components,
        z=z[np.argsort(order)],
        loglik_trace=trace,
        final_loglik=trace[-1],
        n_outer_iterations=t,
        converged=converged,
        diagnostics_history=history,
        stationarity=stationarity,
        unit_ids=unit_ids,
    )
