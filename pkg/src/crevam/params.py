"""Model parameters and their unconstrained (log-Cholesky) parameterization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ParameterError(ValueError):
    """Raised for invalid parameter values (non-PD blocks, bad variances)."""


def _tril_pairs(d):
    return [(r, c) for r in range(d) for c in range(r + 1)]


def log_cholesky(gamma: np.ndarray) -> np.ndarray:
    """Row-wise lower triangle of chol(gamma) with log-transformed diagonal."""
    L = np.linalg.cholesky(gamma)
    out = []
    for r, c in _tril_pairs(gamma.shape[0]):
        out.append(np.log(L[r, c]) if r == c else L[r, c])
    return np.array(out)


def from_log_cholesky(u: np.ndarray, d: int) -> np.ndarray:
    L = np.zeros((d, d))
    for k, (r, c) in enumerate(_tril_pairs(d)):
        L[r, c] = np.exp(u[k]) if r == c else u[k]
    return L @ L.T


@dataclass
class ParameterSet:
    """All fixed effects, residual variances and covariance blocks.

    ``gammas[g - 1]`` is the covariance block of a year-``g`` teacher: its
    persistence effects on years ``g..T`` followed by the attendance effect
    when the mechanism carries one for that year.
    """

    beta_score: np.ndarray
    sigma2: np.ndarray
    gamma_stu: np.ndarray
    gammas: list[np.ndarray]
    beta_attnd: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.beta_score = np.asarray(self.beta_score, dtype=float).ravel()
        self.beta_attnd = np.asarray(self.beta_attnd, dtype=float).ravel()
        self.sigma2 = np.asarray(self.sigma2, dtype=float).ravel()
        self.gamma_stu = np.atleast_2d(np.asarray(self.gamma_stu, dtype=float))
        self.gammas = [np.atleast_2d(np.asarray(g, dtype=float)) for g in self.gammas]

    @property
    def T(self) -> int:
        return len(self.sigma2)

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            beta_score=self.beta_score.copy(),
            sigma2=self.sigma2.copy(),
            gamma_stu=self.gamma_stu.copy(),
            gammas=[g.copy() for g in self.gammas],
            beta_attnd=self.beta_attnd.copy(),
        )

    def blocks(self):
        """Yield (name, matrix) for every covariance block."""
        yield "Gamma_stu", self.gamma_stu
        for g, gam in enumerate(self.gammas, start=1):
            yield f"Gamma_{g}", gam

    def validate(self) -> None:
        if np.any(~np.isfinite(self.sigma2)) or np.any(self.sigma2 <= 0):
            raise ParameterError(f"residual variances must be positive, got {self.sigma2}")
        for name, gam in self.blocks():
            if not np.allclose(gam, gam.T, rtol=0, atol=1e-10 * max(1.0, np.abs(gam).max())):
                raise ParameterError(f"{name} is not symmetric")
            try:
                np.linalg.cholesky(gam)
            except np.linalg.LinAlgError:
                raise ParameterError(f"{name} is not positive definite") from None

    # -- natural-scale vector ---------------------------------------------

    def natural_names(self, x_names=None, w_names=None) -> list[str]:
        x_names = x_names or [f"beta_score[{k}]" for k in range(len(self.beta_score))]
        w_names = w_names or [f"beta_attnd[{k}]" for k in range(len(self.beta_attnd))]
        names = list(x_names) + list(w_names)
        names += [f"sigma2[{g}]" for g in range(1, self.T + 1)]
        for name, gam in self.blocks():
            names += [f"{name}[{r + 1},{c + 1}]" for r, c in _tril_pairs(gam.shape[0])]
        return names

    def natural_vector(self) -> np.ndarray:
        parts = [self.beta_score, self.beta_attnd, self.sigma2]
        for _, gam in self.blocks():
            parts.append(np.array([gam[r, c] for r, c in _tril_pairs(gam.shape[0])]))
        return np.concatenate(parts)

    # -- unconstrained vector ---------------------------------------------

    def to_unconstrained(self) -> np.ndarray:
        parts = [self.beta_score, self.beta_attnd, np.log(self.sigma2)]
        parts += [log_cholesky(gam) for _, gam in self.blocks()]
        return np.concatenate(parts)

    def from_unconstrained(self, u: np.ndarray) -> "ParameterSet":
        """New ParameterSet with this one's shapes, filled from ``u``."""
        u = np.asarray(u, dtype=float)
        k = 0

        def take(n):
            nonlocal k
            out = u[k:k + n]
            k += n
            return out

        beta_score = take(len(self.beta_score)).copy()
        beta_attnd = take(len(self.beta_attnd)).copy()
        sigma2 = np.exp(take(self.T))
        d = self.gamma_stu.shape[0]
        gamma_stu = from_log_cholesky(take(d * (d + 1) // 2), d)
        gammas = []
        for gam in self.gammas:
            d = gam.shape[0]
            gammas.append(from_log_cholesky(take(d * (d + 1) // 2), d))
        if k != len(u):
            raise ParameterError(f"unconstrained vector has length {len(u)}, expected {k}")
        return ParameterSet(beta_score, sigma2, gamma_stu, gammas, beta_attnd)

    def max_abs_diff(self, other: "ParameterSet") -> float:
        return float(np.max(np.abs(self.natural_vector() - other.natural_vector())))

    def to_dict(self) -> dict:
        return {
            "beta_score": self.beta_score.tolist(),
            "beta_attnd": self.beta_attnd.tolist(),
            "sigma2": self.sigma2.tolist(),
            "gamma_stu": self.gamma_stu.tolist(),
            "gammas": [g.tolist() for g in self.gammas],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSet":
        return cls(
            beta_score=d["beta_score"],
            sigma2=d["sigma2"],
            gamma_stu=d["gamma_stu"],
            gammas=d["gammas"],
            beta_attnd=d.get("beta_attnd", []),
        )
