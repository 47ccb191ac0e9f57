"""Joint log-density, its derivatives, and the first-order Laplace approximation.

The penalized objective is

    h(eta) = log f(y_obs | eta) + log f(r | eta) + log f(eta)

with Gaussian scores, probit attendance indicators and eta ~ N(0, G).  The
marginal log-likelihood is approximated at the mode eta_hat by

    l ~= h(eta_hat) + (q/2) log(2 pi) - (1/2) log det(-H(eta_hat)).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import erfcx, log_ndtr

from .design import BlockDiagonalCov, DesignMatrices, EtaLayout, ModelData, assemble_G
from .factor import NotPositiveDefinite, StructuredCholesky
from .params import ParameterSet

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))


class ModeSearchError(RuntimeError):
    """Mode search failed; ``best`` holds the best iterate found."""

    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


# -- probit pieces ------------------------------------------------------------


def log_phi_cdf(u):
    """Tail-stable log of the standard normal CDF."""
    return log_ndtr(u)


def inverse_mills(u):
    """phi(u) / Phi(u), stable for large negative u."""
    return _SQRT_2_OVER_PI / erfcx(-np.asarray(u, dtype=float) / np.sqrt(2.0))


def probit_curvature(u):
    """-(d^2/du^2) log Phi(u) = lambda(u) (u + lambda(u)), always in (0, 1)."""
    lam = inverse_mills(u)
    return lam * (u + lam)


def _signs(r):
    return 2.0 * np.asarray(r, dtype=float) - 1.0


# -- components ----------------------------------------------------------------


def _check_eta(eta, q):
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (q,):
        raise ValueError(f"eta has shape {eta.shape}, expected ({q},)")
    return eta


def log_f_score(y_obs, eta, params: ParameterSet, designs: DesignMatrices) -> float:
    eta = _check_eta(eta, designs.S.shape[1])
    if len(y_obs) != designs.S.shape[0]:
        raise ValueError(f"{len(y_obs)} scores for {designs.S.shape[0]} design rows")
    s2 = params.sigma2[designs.score_year - 1]
    resid = y_obs - designs.X @ params.beta_score - designs.S @ eta
    return float(-0.5 * np.sum(np.log(s2) + LOG_2PI + resid ** 2 / s2))


def log_f_attend(r, eta, params: ParameterSet, designs: DesignMatrices) -> float:
    eta = _check_eta(eta, designs.Z.shape[1])
    if len(r) != designs.Z.shape[0]:
        raise ValueError(f"{len(r)} indicators for {designs.Z.shape[0]} attendance rows")
    v = designs.W @ params.beta_attnd + designs.Z @ eta
    return float(np.sum(log_phi_cdf(_signs(r) * v)))


def log_prior(eta, params: ParameterSet, layout: EtaLayout) -> float:
    eta = _check_eta(eta, layout.q)
    G = assemble_G(params, layout)
    return float(-0.5 * (layout.q * LOG_2PI + G.logdet() + G.quad_inv(eta)))


# -- evaluator ---------------------------------------------------------------


class Objective:
    """h(eta) and derivatives for fixed parameters; parameter-only work is cached."""

    def __init__(self, params: ParameterSet, data: ModelData):
        self.params = params
        self.data = data
        lay = data.layout
        dz = data.designs
        self.G: BlockDiagonalCov = assemble_G(params, lay)
        self.logdet_G = self.G.logdet()
        self.sigma_row = params.sigma2[dz.score_year - 1]
        self.offset = dz.y - dz.X @ params.beta_score
        self.const_score = -0.5 * float(np.sum(np.log(self.sigma_row) + LOG_2PI))
        SRS = None
        for g, StS in enumerate(data.StS_by_year):
            term = StS / params.sigma2[g]
            SRS = term if SRS is None else SRS + term
        self.A0 = (SRS + self.G.inv_sparse()).tocsr()
        self.attend = data.has_attendance and len(dz.r) > 0
        if self.attend:
            self.sign = _signs(dz.r)
            self.Wb = dz.W @ params.beta_attnd
        self._fixed_factor = None

    @property
    def q(self) -> int:
        return self.data.layout.q

    def value_grad(self, eta):
        dz = self.data.designs
        resid = self.offset - dz.S @ eta
        wres = resid / self.sigma_row
        val = self.const_score - 0.5 * float(resid @ wres)
        grad = dz.S.T @ wres
        if self.attend:
            u = self.sign * (self.Wb + dz.Z @ eta)
            val += float(np.sum(log_phi_cdf(u)))
            grad = grad + dz.Z.T @ (self.sign * inverse_mills(u))
        Gi = self.G.inv_times(eta)
        val += -0.5 * (self.q * LOG_2PI + self.logdet_G + float(eta @ Gi))
        return val, grad - Gi

    def value(self, eta) -> float:
        return self.value_grad(eta)[0]

    def curvature(self, eta):
        dz = self.data.designs
        u = self.sign * (self.Wb + dz.Z @ eta)
        return probit_curvature(u)

    def neg_hessian(self, eta) -> sp.csr_matrix:
        if not self.attend:
            return self.A0
        Z = self.data.designs.Z
        return (self.A0 + Z.T @ sp.diags(self.curvature(eta)) @ Z).tocsr()

    def factor(self, eta) -> StructuredCholesky:
        lay = self.data.layout
        if not self.attend:
            if self._fixed_factor is None:
                self._fixed_factor = StructuredCholesky(self.A0, lay.n, lay.student_dim)
            return self._fixed_factor
        return StructuredCholesky(self.neg_hessian(eta), lay.n, lay.student_dim)

    def batch_values(self, etas: np.ndarray) -> np.ndarray:
        """h at each row of ``etas`` (P x q)."""
        dz = self.data.designs
        E = np.asarray(etas, dtype=float).T
        resid = self.offset[:, None] - dz.S @ E
        val = self.const_score - 0.5 * np.sum(resid ** 2 / self.sigma_row[:, None], axis=0)
        if self.attend:
            U = self.sign[:, None] * (self.Wb[:, None] + dz.Z @ E)
            val = val + np.sum(log_phi_cdf(U), axis=0)
        GiE = self.G.inv_sparse() @ E
        val = val - 0.5 * (self.q * LOG_2PI + self.logdet_G + np.sum(E * GiE, axis=0))
        return val


def objective_h(eta, params: ParameterSet, data: ModelData):
    """(h, gradient, Hessian) at ``eta``; the Hessian is sparse and negative definite."""
    obj = Objective(params, data)
    eta = _check_eta(eta, obj.q)
    val, grad = obj.value_grad(eta)
    return val, grad, -obj.neg_hessian(eta)


# -- Laplace approximation ------------------------------------------------------


@dataclass
class LaplaceState:
    eta: np.ndarray
    factor: StructuredCholesky
    h: float
    grad_norm: float
    iterations: int
    objective: Objective

    @property
    def logdet(self) -> float:
        """log det(-H) at the mode."""
        return self.factor.logdet

    @property
    def loglik(self) -> float:
        return self.h + 0.5 * len(self.eta) * LOG_2PI - 0.5 * self.logdet

    @property
    def neg2loglik(self) -> float:
        return -2.0 * self.loglik


def find_mode(params: ParameterSet, data: ModelData, eta0=None, tol: float = 1e-9, max_iter: int = 200,
              max_halvings: int = 50, objective: Objective | None = None) -> LaplaceState:
    """Damped Newton maximization of h over eta."""
    obj = objective or Objective(params, data)
    q = obj.q
    eta = np.zeros(q) if eta0 is None else np.array(eta0, dtype=float)
    f, g = obj.value_grad(eta)
    if not np.isfinite(f):
        eta = np.zeros(q)
        f, g = obj.value_grad(eta)
    stalled = False
    for it in range(max_iter + 1):
        try:
            fac = obj.factor(eta)
        except NotPositiveDefinite as exc:
            raise ModeSearchError(f"negative Hessian not positive definite: {exc}", best=eta) from None
        gmax = float(np.max(np.abs(g))) if q else 0.0
        if gmax <= tol * (1.0 + abs(f)):
            return LaplaceState(eta, fac, f, gmax, it, obj)
        if it == max_iter:
            break
        step = fac.solve(g)
        # with huge curvature (a variance near zero) the gradient test can sit
        # above rounding forever; stop once Newton makes no progress in h and
        # the decrement says there is none left to make
        if stalled and float(g @ step) <= 1e-12 * (1.0 + abs(f)):
            return LaplaceState(eta, fac, f, gmax, it, obj)
        t = 1.0
        for _ in range(max_halvings):
            cand = eta + t * step
            fc, gc = obj.value_grad(cand)
            if np.isfinite(fc) and fc >= f - 1e-13 * (1.0 + abs(f)):
                break
            t *= 0.5
        else:
            if gmax <= 1e-6 * (1.0 + abs(f)):
                # objective flat to rounding; accept the current point
                return LaplaceState(eta, fac, f, gmax, it, obj)
            raise ModeSearchError("step halving failed to increase h", best=eta)
        stalled = abs(fc - f) <= 1e-14 * (1.0 + abs(f))
        eta, f, g = cand, fc, gc
    raise ModeSearchError(f"mode search did not converge in {max_iter} iterations", best=eta)


def laplace_loglik(params: ParameterSet, data: ModelData, eta0=None, **kwargs):
    """First-order Laplace approximation; returns (-2 loglik, LaplaceState)."""
    state = find_mode(params, data, eta0=eta0, **kwargs)
    return state.neg2loglik, state
