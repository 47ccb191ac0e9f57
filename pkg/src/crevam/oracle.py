"""Brute-force references for tiny instances: dense Gaussian marginals,
tensor-grid Gauss-Hermite quadrature and randomized quasi-Monte Carlo."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp, ndtri
from scipy.stats import qmc

from .design import ModelData
from .likelihood import LOG_2PI, Objective, find_mode
from .params import ParameterSet


class OracleError(ValueError):
    pass


def gaussian_marginal(params: ParameterSet, data: ModelData):
    """Exact -2 loglik and BLUPs of the score model from dense matrices.

    y ~ N(X beta, S G S' + R); BLUP = G S' V^{-1} (y - X beta).  Only valid
    without an attendance submodel.
    """
    if data.has_attendance:
        raise OracleError("closed form needs the MAR mechanism")
    dz = data.designs
    from .design import assemble_G

    G = assemble_G(params, data.layout).dense()
    S = dz.S.toarray()
    V = S @ G @ S.T + np.diag(params.sigma2[dz.score_year - 1])
    resid = dz.y - dz.X @ params.beta_score
    L = np.linalg.cholesky(V)
    alpha = np.linalg.solve(L, resid)
    neg2 = len(resid) * LOG_2PI + 2 * np.sum(np.log(np.diag(L))) + float(alpha @ alpha)
    blup = G @ S.T @ np.linalg.solve(V, resid)
    return float(neg2), blup


@dataclass(frozen=True)
class QuadratureSpec:
    nodes: int = 10
    max_dim: int = 6
    adaptive: bool = True
    max_points: int = 10 ** 8

    def __post_init__(self):
        if self.nodes < 10:
            raise OracleError("quadrature needs at least 10 nodes per dimension")


def _grid(params, data, spec: QuadratureSpec, chunk: int = 200_000):
    q = data.layout.q
    if q > spec.max_dim:
        raise OracleError(f"dimension {q} exceeds the quadrature cap {spec.max_dim}")
    total = spec.nodes ** q
    if total > spec.max_points:
        raise OracleError(f"{total} grid points exceed the guard of {spec.max_points}")
    obj = Objective(params, data)
    if spec.adaptive:
        state = find_mode(params, data, objective=obj)
        center = state.eta
        A = obj.neg_hessian(center).toarray()
        L = np.linalg.cholesky(np.linalg.inv(A))
    else:
        center = np.zeros(q)
        L = np.linalg.cholesky(obj.G.dense())
    x, w = hermegauss(spec.nodes)
    logw = np.log(w)
    logdetL = float(np.sum(np.log(np.diag(L))))

    run_max = -np.inf
    run_sum = 0.0
    run_mom = np.zeros(q)
    for lo in range(0, total, chunk):
        flat = np.arange(lo, min(lo + chunk, total))
        digits = np.empty((len(flat), q), dtype=int)
        rem = flat
        for k in range(q - 1, -1, -1):
            digits[:, k] = rem % spec.nodes
            rem = rem // spec.nodes
        z = x[digits]
        eta = center + z @ L.T
        terms = logw[digits].sum(axis=1) + obj.batch_values(eta) + 0.5 * np.sum(z * z, axis=1)
        m = float(terms.max())
        if m > run_max:
            scale = np.exp(run_max - m) if np.isfinite(run_max) else 0.0
            run_sum *= scale
            run_mom *= scale
            run_max = m
        e = np.exp(terms - run_max)
        run_sum += float(e.sum())
        run_mom += e @ eta
    log_integral = logdetL + run_max + np.log(run_sum)
    return float(log_integral), run_mom / run_sum


def quad_loglik(params: ParameterSet, data: ModelData, spec: QuadratureSpec = QuadratureSpec()) -> float:
    """-2 loglik by tensor-grid Gauss-Hermite quadrature over eta."""
    return -2.0 * _grid(params, data, spec)[0]


def quad_posterior_means(params: ParameterSet, data: ModelData, spec: QuadratureSpec = QuadratureSpec()):
    return _grid(params, data, spec)[1]


@dataclass(frozen=True)
class QMCResult:
    neg2loglik: float
    stderr: float
    n_points: int
    flagged: bool


def qmc_loglik(params: ParameterSet, data: ModelData, n_points: int, seed: int, n_batches: int = 16,
               tolerance: float | None = None, max_dim: int = 12) -> QMCResult:
    """-2 loglik by scrambled Sobol sampling of the prior, with a jackknife error bar.

    Points are split into ``n_batches`` independently scrambled sequences;
    the error bar is the delete-one-batch jackknife on the -2 loglik scale.
    """
    q = data.layout.q
    if q > max_dim:
        raise OracleError(f"dimension {q} exceeds the QMC cap {max_dim}")
    per = max(1, n_points // n_batches)
    m = int(np.ceil(np.log2(per)))
    per = 2 ** m
    obj = Objective(params, data)
    Lg = np.linalg.cholesky(obj.G.dense())
    root = np.random.SeedSequence(seed)
    batch_lse = []
    for child in root.spawn(n_batches):
        u = qmc.Sobol(d=q, scramble=True, seed=np.random.Generator(np.random.Philox(child))).random_base2(m)
        z = ndtri(np.clip(u, 1e-16, 1 - 1e-16))
        eta = z @ Lg.T
        data_ll = obj.batch_values(eta) + 0.5 * (q * LOG_2PI + obj.logdet_G + np.sum(z * z, axis=1))
        batch_lse.append(logsumexp(data_ll))
    batch_lse = np.array(batch_lse)
    N = per * n_batches
    est = float(logsumexp(batch_lse) - np.log(N))
    loo = np.array([logsumexp(np.delete(batch_lse, b)) - np.log(N - per) for b in range(n_batches)])
    se = float(np.sqrt((n_batches - 1) / n_batches * np.sum((loo - loo.mean()) ** 2)))
    flagged = tolerance is not None and 2 * se > tolerance
    return QMCResult(-2.0 * est, 2.0 * se, N, bool(flagged))
