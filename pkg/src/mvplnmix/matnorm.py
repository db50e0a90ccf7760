"""Matrix variate normal distribution and Kronecker helpers.

With row-major vectorization, ``X ~ MN(M, Phi, Omega)`` is equivalent to
``vec(X) ~ N(vec(M), Phi (x) Omega)``.  Determinants and inverses go through
Cholesky factors; ill-conditioned covariances are rejected, never regularized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotPositiveDefiniteError

__all__ = [
    "MatNormParams",
    "cholesky",
    "spd_inverse",
    "logdet",
    "kronecker",
    "log_density",
    "sample",
]

LOG_2PI = float(np.log(2.0 * np.pi))
PIVOT_RATIO = 1e-10
SYMMETRY_TOL = 1e-12


def cholesky(A, name: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor, rejecting near-singular input."""
    A = np.asarray(A, dtype=float)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(f"{name} is not positive-definite") from None
    d = np.diag(L)
    if not np.all(np.isfinite(L)) or d.min() < PIVOT_RATIO * d.max():
        raise NotPositiveDefiniteError(f"{name} is numerically singular")
    return L


def logdet(A, name: str = "matrix") -> float:
    return float(2.0 * np.sum(np.log(np.diag(cholesky(A, name)))))


def spd_inverse(A, name: str = "matrix") -> np.ndarray:
    L = cholesky(A, name)
    Linv = np.linalg.inv(L)
    inv = Linv.T @ Linv
    return 0.5 * (inv + inv.T)


def kronecker(A, B) -> np.ndarray:
    """Kronecker product; block ``(i, j)`` equals ``A[i, j] * B``."""
    return np.kron(np.asarray(A, dtype=float), np.asarray(B, dtype=float))


def _check_symmetric(A: np.ndarray, name: str) -> None:
    scale = max(1.0, float(np.max(np.abs(A))))
    if np.max(np.abs(A - A.T)) > SYMMETRY_TOL * scale:
        raise NotPositiveDefiniteError(f"{name} is not symmetric")


@dataclass(frozen=True, eq=False)
class MatNormParams:
    """Mean ``M`` (r x p), row covariance ``Phi`` (r x r), column covariance ``Omega`` (p x p)."""

    M: np.ndarray
    Phi: np.ndarray
    Omega: np.ndarray

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        Phi = np.atleast_2d(np.asarray(self.Phi, dtype=float))
        Omega = np.atleast_2d(np.asarray(self.Omega, dtype=float))
        r, p = M.shape
        if Phi.shape != (r, r):
            raise ValueError(f"Phi has shape {Phi.shape}, expected {(r, r)}")
        if Omega.shape != (p, p):
            raise ValueError(f"Omega has shape {Omega.shape}, expected {(p, p)}")
        if not np.all(np.isfinite(M)):
            raise ValueError("M has non-finite entries")
        _check_symmetric(Phi, "Phi")
        _check_symmetric(Omega, "Omega")
        chol_phi = cholesky(Phi, "Phi")
        chol_omega = cholesky(Omega, "Omega")
        for name, arr in (("M", M), ("Phi", Phi), ("Omega", Omega)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_chol_phi", chol_phi)
        object.__setattr__(self, "_chol_omega", chol_omega)

    @property
    def r(self) -> int:
        return self.M.shape[0]

    @property
    def p(self) -> int:
        return self.M.shape[1]

    @property
    def chol_phi(self) -> np.ndarray:
        return self._chol_phi

    @property
    def chol_omega(self) -> np.ndarray:
        return self._chol_omega

    def logdet_phi(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self._chol_phi))))

    def logdet_omega(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self._chol_omega))))

    def logdet_sigma(self) -> float:
        """log |Phi (x) Omega| = p log|Phi| + r log|Omega|."""
        return self.p * self.logdet_phi() + self.r * self.logdet_omega()

    def phi_inv(self) -> np.ndarray:
        return spd_inverse(self.Phi, "Phi")

    def omega_inv(self) -> np.ndarray:
        return spd_inverse(self.Omega, "Omega")

    def precision(self) -> np.ndarray:
        """Precision of the row-major vectorization, ``Phi^-1 (x) Omega^-1``."""
        return kronecker(self.phi_inv(), self.omega_inv())

    def covariance(self) -> np.ndarray:
        return kronecker(self.Phi, self.Omega)

    def to_dict(self) -> dict:
        return {"M": self.M.tolist(), "Phi": self.Phi.tolist(), "Omega": self.Omega.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MatNormParams":
        return cls(np.array(d["M"]), np.array(d["Phi"]), np.array(d["Omega"]))


def log_density(X, params: MatNormParams) -> float:
    """Matrix normal log-density at ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape != params.M.shape:
        raise ValueError(f"X has shape {X.shape}, expected {params.M.shape}")
    r, p = params.r, params.p
    D = X - params.M
    # tr[Phi^-1 D Omega^-1 D'] = ||L_phi^-1 D L_omega^-T||_F^2
    A = np.linalg.solve(params.chol_phi, D)
    B = np.linalg.solve(params.chol_omega, A.T)
    quad = float(np.sum(B * B))
    return (
        -0.5 * r * p * LOG_2PI
        - 0.5 * p * params.logdet_phi()
        - 0.5 * r * params.logdet_omega()
        - 0.5 * quad
    )


def sample(params: MatNormParams, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``M + L_phi Z L_omega'`` with ``Z`` iid standard normal."""
    shape = params.M.shape if size is None else (size, *params.M.shape)
    Z = rng.standard_normal(shape)
    return params.M + params.chol_phi @ Z @ params.chol_omega.T
