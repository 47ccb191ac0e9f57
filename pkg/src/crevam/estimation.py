"""Laplace-EM estimation, standard errors and EBLUP tables."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .data import CohortData
from .design import ModelData, ModelSpec, build_model
from .likelihood import LaplaceState, ModeSearchError, inverse_mills, laplace_loglik, probit_curvature
from .params import ParameterError, ParameterSet

logger = logging.getLogger(__name__)

Z90 = 1.6448536269514722


class EstimationError(RuntimeError):
    pass


@dataclass
class FitOptions:
    em_tol: float = 1e-8
    param_tol: float = 1e-6
    max_iter: int = 500
    mode_tol: float = 1e-9
    mode_max_iter: int = 200
    monotone_slack: float = 1e-6
    ridge: float = 1e-8
    compute_se: bool = True
    se_step: float = 1e-4
    start: ParameterSet | None = None
    accelerate: bool = True
    # hold score/attendance covariances at zero (attendance then ignorable)
    pin_attendance_correlation: bool = False
    memory: int = 5
    seed: int = 0  # accepted for interface symmetry; fitting draws no random numbers
    # called as callback(iteration, params, neg2loglik) after every iteration
    callback: Callable | None = None


# -- moments ------------------------------------------------------------------


@dataclass
class Moments:
    """Posterior summaries of eta under the Gaussian (Laplace) approximation."""

    eta: np.ndarray
    student_second: np.ndarray  # (n, d, d): E[b b'] per student block
    teacher_second: list[np.ndarray]  # per year (m_g, D_g, D_g)
    score_quad: np.ndarray  # s' V s per score row
    neg2loglik: float
    state: LaplaceState


def teacher_blocks_of(V_tt: np.ndarray, data: ModelData) -> list[np.ndarray]:
    lay = data.layout
    out = []
    for g in range(1, lay.T + 1):
        D = lay.teacher_dim(g)
        m = lay.m[g - 1]
        off = lay.teacher_start[g - 1] - lay.n_student_coords
        sub = V_tt[off: off + m * D, off: off + m * D].reshape(m, D, m, D)
        out.append(np.einsum("iaib->iab", sub))
    return out


def moments_from_state(state: LaplaceState, data: ModelData) -> Moments:
    lay = data.layout
    fac = state.factor
    eta = state.eta
    b = lay.student_part(eta)
    stu = np.einsum("ia,ib->iab", b, b) + fac.V_ss_blocks
    tea = []
    for g, V in enumerate(teacher_blocks_of(fac.V_tt, data), start=1):
        t = lay.teacher_part(eta, g)
        tea.append(np.einsum("ia,ib->iab", t, t) + V)
    return Moments(eta, stu, tea, fac.quad_rows(data.designs.S), state.neg2loglik, state)


def e_step(params: ParameterSet, data: ModelData, eta0=None, options: FitOptions | None = None) -> Moments:
    opts = options or FitOptions()
    _, state = laplace_loglik(params, data, eta0=eta0, tol=opts.mode_tol, max_iter=opts.mode_max_iter)
    return moments_from_state(state, data)


# -- M-step -------------------------------------------------------------------


def _repair_pd(gam: np.ndarray, name: str, ridge: float) -> np.ndarray:
    gam = 0.5 * (gam + gam.T)
    for k in range(6):
        try:
            np.linalg.cholesky(gam)
            return gam
        except np.linalg.LinAlgError:
            bump = ridge * (10 ** k) * max(1.0, float(np.trace(gam)) / len(gam))
            logger.warning("%s not positive definite; adding ridge %.3g", name, bump)
            gam = gam + bump * np.eye(len(gam))
    raise EstimationError(f"{name} update is not positive definite after ridge repair")


def attendance_index(data: ModelData):
    """Position of the attendance coordinate in the student block and each teacher block (None if absent)."""
    lay = data.layout
    stu = 1 if lay.student_dim == 2 else None
    tea = [lay.K(g) if lay.has_lambda[g - 1] else None for g in range(1, lay.T + 1)]
    return stu, tea


def _unlink(gam: np.ndarray, k: int | None) -> np.ndarray:
    if k is None:
        return gam
    gam = gam.copy()
    keep = gam[k, k]
    gam[k, :] = 0.0
    gam[:, k] = 0.0
    gam[k, k] = keep
    return gam


def pin_attendance(params: ParameterSet, data: ModelData) -> ParameterSet:
    stu, tea = attendance_index(data)
    out = params.copy()
    out.gamma_stu = _unlink(out.gamma_stu, stu)
    out.gammas = [_unlink(gm, k) for gm, k in zip(out.gammas, tea)]
    return out


def score_side_update(mom: Moments, data: ModelData, params_old: ParameterSet, ridge: float = 1e-8) -> ParameterSet:
    """Closed-form updates of beta_score, residual variances and covariance blocks."""
    dz = data.designs
    Seta = dz.S @ mom.eta
    w = 1.0 / params_old.sigma2[dz.score_year - 1]
    XtW = dz.X.T * w
    lhs = XtW @ dz.X
    try:
        cf = sla.cho_factor(lhs, check_finite=True)
        beta = sla.cho_solve(cf, XtW @ (dz.y - Seta))
    except (sla.LinAlgError, ValueError):
        raise EstimationError("singular fixed-effects system: collinear score fixed effects") from None
    if np.linalg.cond(lhs) > 1e12:
        raise EstimationError("singular fixed-effects system: collinear score fixed effects")
    resid = dz.y - dz.X @ beta - Seta
    e2 = resid ** 2 + mom.score_quad
    sigma2 = params_old.sigma2.copy()
    for g, rows in enumerate(data.score_year_rows):
        if len(rows):
            sigma2[g] = float(np.mean(e2[rows]))
    gamma_stu = _repair_pd(mom.student_second.mean(axis=0), "Gamma_stu", ridge)
    gammas = [
        _repair_pd(s.mean(axis=0), f"Gamma_{g}", ridge) if len(s) else params_old.gammas[g - 1]
        for g, s in enumerate(mom.teacher_second, start=1)
    ]
    return ParameterSet(beta, sigma2, gamma_stu, gammas, params_old.beta_attnd.copy())


def attendance_direction(state: LaplaceState, data: ModelData):
    """Gradient of the Laplace log-likelihood in beta_attnd and a Newton direction.

    The gradient includes the derivative of the log-determinant term through
    the implicit dependence of the mode; the curvature used for the direction
    is that of h profiled over eta.
    """
    dz = data.designs
    fac = state.factor
    obj = state.objective
    s = obj.sign
    u = s * (obj.Wb + dz.Z @ state.eta)
    lam = inverse_mills(u)
    c = lam * (u + lam)
    dc_dv = s * (-c * (u + lam) + lam * (1.0 - c))
    B = np.asarray(dz.Z.T @ (c[:, None] * dz.W))
    VB = fac.solve(B)
    dv = dz.W - dz.Z @ VB
    zvz = fac.quad_rows(dz.Z)
    grad = dz.W.T @ (s * lam) - 0.5 * (dv.T @ (dc_dv * zvz))
    info = (dz.W.T * c) @ dz.W - B.T @ VB
    info = 0.5 * (info + info.T)
    try:
        direction = sla.cho_solve(sla.cho_factor(info), grad)
    except sla.LinAlgError:
        direction = np.linalg.lstsq(info, grad, rcond=None)[0]
    return grad, direction


def attendance_step(params: ParameterSet, data: ModelData, state: LaplaceState, options: FitOptions,
                    max_halvings: int = 12):
    """One damped Newton step on beta_attnd, others held fixed.

    Returns (params, state, -2 loglik) at the accepted point (the input point
    when no step improves the Laplace log-likelihood).
    """
    neg2 = state.neg2loglik
    _, direction = attendance_direction(state, data)
    t = 1.0
    for _ in range(max_halvings):
        trial = params.copy()
        trial.beta_attnd = params.beta_attnd + t * direction
        try:
            neg2_t, state_t = laplace_loglik(trial, data, eta0=state.eta, tol=options.mode_tol,
                                             max_iter=options.mode_max_iter)
        except ModeSearchError:
            t *= 0.5
            continue
        if neg2_t <= neg2:
            return trial, state_t, neg2_t
        t *= 0.5
    return params, state, neg2


def m_step(mom: Moments, data: ModelData, params_old: ParameterSet, options: FitOptions | None = None) -> ParameterSet:
    """Closed-form score-side updates followed by the beta_attnd conditional step."""
    opts = options or FitOptions()
    new = score_side_update(mom, data, params_old, opts.ridge)
    if opts.pin_attendance_correlation:
        new = pin_attendance(new, data)
    if data.has_attendance:
        _, state = laplace_loglik(new, data, eta0=mom.eta, tol=opts.mode_tol, max_iter=opts.mode_max_iter)
        new, _, _ = attendance_step(new, data, state, opts)
    return new


# -- starting values ------------------------------------------------------------


def probit_fit(W: np.ndarray, r: np.ndarray, max_iter: int = 50) -> np.ndarray:
    """Fixed-effects probit regression by Newton's method."""
    beta = np.zeros(W.shape[1])
    s = 2.0 * r - 1.0
    for _ in range(max_iter):
        u = s * (W @ beta)
        lam = inverse_mills(u)
        grad = W.T @ (s * lam)
        info = (W.T * probit_curvature(u)) @ W
        step = np.linalg.solve(info, grad)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-10:
            break
    return beta


def starting_values(data: ModelData) -> ParameterSet:
    """OLS fixed effects, per-year residual variances, 0.1 I covariance blocks,
    and a fixed-effects probit for the attendance means."""
    dz = data.designs
    lay = data.layout
    if dz.X.shape[0] < dz.X.shape[1] or np.linalg.matrix_rank(dz.X) < dz.X.shape[1]:
        raise EstimationError("score fixed-effects design is rank deficient (collinear fixed effects)")
    beta = np.linalg.lstsq(dz.X, dz.y, rcond=None)[0]
    resid = dz.y - dz.X @ beta
    sigma2 = np.array([float(np.mean(resid[rows] ** 2)) if len(rows) else 1.0 for rows in data.score_year_rows])
    sigma2 = np.maximum(sigma2, 1e-4)
    beta_attnd = probit_fit(dz.W, dz.r) if data.has_attendance else np.zeros(0)
    return ParameterSet(
        beta_score=beta,
        sigma2=sigma2,
        gamma_stu=0.1 * np.eye(lay.student_dim),
        gammas=[0.1 * np.eye(lay.teacher_dim(g)) for g in range(1, lay.T + 1)],
        beta_attnd=beta_attnd,
    )


# -- results --------------------------------------------------------------------


@dataclass
class StandardErrors:
    names: list[str]
    estimates: np.ndarray
    se: np.ndarray  # NaN where absent
    cov: np.ndarray | None
    ok: bool
    diagnostic: str = ""

    def as_dict(self) -> dict:
        return {n: (None if not np.isfinite(s) else float(s)) for n, s in zip(self.names, self.se)}


@dataclass
class EffectRecord:
    effect_id: str
    kind: str  # "student" or "teacher"
    owner: str
    year: int | None  # teacher's year
    component: str  # "score", "attend", "on<t>"
    value: float
    sd: float
    lower: float
    upper: float
    label: str


def ci_label(lower: float, upper: float) -> str:
    if lower > 0:
        return "+"
    if upper < 0:
        return "-"
    return "0"


@dataclass
class FitResult:
    params: ParameterSet
    neg2loglik: float
    eta: np.ndarray
    cond_sd: np.ndarray
    iterations: int
    converged: bool
    trace: list[float]
    model: ModelData
    se: StandardErrors | None = None
    monotone_violations: int = 0
    message: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def layout(self):
        return self.model.layout

    @property
    def names(self) -> list[str]:
        return self.params.natural_names(self.model.designs.x_names, self.model.designs.w_names)

    def estimates(self) -> dict[str, float]:
        return dict(zip(self.names, self.params.natural_vector().tolist()))

    @property
    def eblups(self) -> list[EffectRecord]:
        return eblup_table(self)

    def effect_vector(self, g: int, t: int | None = None, attend: bool = False):
        """(values, sds) of the year-g teachers' effect on year t (or attendance)."""
        lay = self.layout
        j = np.arange(lay.m[g - 1])
        idx = lay.lambda_coord(g, j) if attend else lay.theta_coord(g, j, t if t is not None else g)
        return self.eta[idx], self.cond_sd[idx]


def eblup_table(fit: FitResult, layout=None) -> list[EffectRecord]:
    """Every random effect's EBLUP with its conditional sd and 90% interval."""
    lay = layout or fit.layout
    cohort = fit.model.cohort
    out = []
    for blk in lay.blocks:
        if blk.kind == "student":
            owner = cohort.student_ids[blk.owner]
            prefix = f"student:{owner}"
        else:
            owner = cohort.rosters[blk.year - 1][blk.owner]
            prefix = f"teacher:{blk.year}:{owner}"
        for k, comp in enumerate(blk.labels):
            v = float(fit.eta[blk.start + k])
            s = float(fit.cond_sd[blk.start + k])
            lo, hi = v - Z90 * s, v + Z90 * s
            out.append(EffectRecord(f"{prefix}:{comp}", blk.kind, owner, blk.year, comp, v, s, lo, hi,
                                    ci_label(lo, hi)))
    return out


# -- fitting --------------------------------------------------------------------


def _validate_start(params: ParameterSet, data: ModelData) -> ParameterSet:
    lay = data.layout
    dz = data.designs
    if len(params.beta_score) != dz.X.shape[1] or len(params.beta_attnd) != dz.W.shape[1]:
        raise EstimationError("starting values do not match the fixed-effects designs")
    if params.gamma_stu.shape[0] != lay.student_dim or any(
            params.gammas[g - 1].shape[0] != lay.teacher_dim(g) for g in range(1, lay.T + 1)):
        raise EstimationError("starting covariance blocks do not match the random-effects layout")
    params.validate()
    return params


def em_map(params: ParameterSet, state: LaplaceState, data: ModelData, opts: FitOptions):
    """One EM sweep from ``params`` whose Laplace state is ``state``."""
    mom = moments_from_state(state, data)
    new = score_side_update(mom, data, params, opts.ridge)
    if opts.pin_attendance_correlation:
        new = pin_attendance(new, data)
    neg2, state_new = laplace_loglik(new, data, eta0=state.eta, tol=opts.mode_tol, max_iter=opts.mode_max_iter)
    if data.has_attendance:
        new, state_new, neg2 = attendance_step(new, data, state_new, opts)
    return new, state_new, neg2


class _Anderson:
    """Anderson mixing of the EM fixed-point map on the unconstrained scale."""

    def __init__(self, memory: int = 5):
        self.memory = memory
        self.du: list[np.ndarray] = []
        self.dg: list[np.ndarray] = []
        self.last = None

    def reset(self):
        self.du.clear()
        self.dg.clear()
        self.last = None

    def propose(self, u: np.ndarray, fu: np.ndarray) -> np.ndarray | None:
        g = fu - u
        if self.last is not None:
            self.du.append(u - self.last[0])
            self.dg.append(g - self.last[1])
            if len(self.du) > self.memory:
                self.du.pop(0)
                self.dg.pop(0)
        self.last = (u, g)
        if not self.du:
            return None
        dU = np.column_stack(self.du)
        dG = np.column_stack(self.dg)
        gam = np.linalg.lstsq(dG, g, rcond=1e-10)[0]
        return fu - (dU + dG) @ gam


def fit_model(data: ModelData, options: FitOptions | None = None) -> FitResult:
    opts = options or FitOptions()
    params = _validate_start(opts.start.copy(), data) if opts.start is not None else starting_values(data)
    try:
        params.validate()
    except ParameterError as exc:
        raise EstimationError(str(exc)) from None
    if opts.pin_attendance_correlation:
        params = pin_attendance(params, data)
    neg2, state = laplace_loglik(params, data, tol=opts.mode_tol, max_iter=opts.mode_max_iter)
    trace = [neg2]
    converged = False
    violations = 0
    it = 0
    accel = _Anderson(opts.memory) if opts.accelerate else None
    for it in range(1, opts.max_iter + 1):
        p1, s1, n1 = em_map(params, state, data, opts)
        delta = n1 - neg2
        # convergence is judged on the plain sweep so a converged fit is an
        # EM fixed point whether or not extrapolation is used
        if abs(delta) < opts.em_tol * (1.0 + abs(n1)) and p1.max_abs_diff(params) < opts.param_tol:
            params, state, neg2 = p1, s1, n1
            trace.append(neg2)
            if opts.callback is not None:
                opts.callback(it, params, neg2)
            converged = True
            break
        new, state_new, neg2_new = p1, s1, n1
        if accel is not None:
            cand_u = accel.propose(params.to_unconstrained(), p1.to_unconstrained())
            if cand_u is not None:
                try:
                    cand = params.from_unconstrained(cand_u)
                    if opts.pin_attendance_correlation:
                        cand = pin_attendance(cand, data)
                    cand.validate()
                    nc, sc = laplace_loglik(cand, data, eta0=s1.eta, tol=opts.mode_tol,
                                            max_iter=opts.mode_max_iter)
                except (ModeSearchError, ParameterError, np.linalg.LinAlgError, FloatingPointError, ValueError):
                    nc = np.inf
                if np.isfinite(nc) and nc <= n1:
                    new, state_new, neg2_new = cand, sc, nc
                else:
                    accel.reset()
        if neg2_new - neg2 > opts.monotone_slack:
            violations += 1
            logger.debug("iteration %d: -2l increased by %.3g", it, neg2_new - neg2)
        params, state, neg2 = new, state_new, neg2_new
        trace.append(neg2)
        if opts.callback is not None:
            opts.callback(it, params, neg2)
    if not converged:
        logger.warning("EM stopped at the iteration cap (%d) without converging", opts.max_iter)
    fac = state.factor
    result = FitResult(
        params=params,
        neg2loglik=neg2,
        eta=state.eta.copy(),
        cond_sd=np.sqrt(np.maximum(fac.diag_inv, 0.0)),
        iterations=it,
        converged=converged,
        trace=trace,
        model=data,
        monotone_violations=violations,
    )
    if opts.compute_se and opts.pin_attendance_correlation:
        nan = np.full(len(result.names), np.nan)
        result.se = StandardErrors(result.names, params.natural_vector(), nan, None, False,
                                   "not computed for fits with pinned covariances")
    elif opts.compute_se:
        result.se = standard_errors(params, data, eta0=state.eta, step=opts.se_step,
                                    names=result.names, options=opts)
    return result


def fit(cohort: CohortData, spec: ModelSpec, options: FitOptions | None = None) -> FitResult:
    """Fit the joint score/attendance model by Laplace EM.

    Raises :class:`~crevam.design.SeparationError` when the attendance
    specification suffers quasi-complete separation.
    """
    return fit_model(build_model(cohort, spec), options)


# -- standard errors ------------------------------------------------------------


def standard_errors(params_hat: ParameterSet, data: ModelData, eta0=None, step: float = 1e-4, names=None,
                    options: FitOptions | None = None, boundary_tol: float = 1e-6) -> StandardErrors:
    """Observed-information standard errors by central finite differences.

    The Hessian of the Laplace -2 loglik is taken over the unconstrained
    parameters (raw betas, log residual variances, log-Cholesky factors) and
    mapped to the natural scale by the delta method.
    """
    opts = options or FitOptions()
    names = names or params_hat.natural_names(data.designs.x_names, data.designs.w_names)
    est = params_hat.natural_vector()
    nan = np.full(len(est), np.nan)
    for name, gam in params_hat.blocks():
        ev = np.linalg.eigvalsh(gam)
        if ev.min() <= boundary_tol * max(1.0, float(np.max(np.diag(gam)))):
            return StandardErrors(names, est, nan, None, False,
                                  f"{name} is at the boundary of the parameter space (min eigenvalue {ev.min():.3g})")
    u0 = params_hat.to_unconstrained()
    k = len(u0)
    if eta0 is None:
        eta0 = laplace_loglik(params_hat, data, tol=opts.mode_tol)[1].eta

    def f(u):
        return laplace_loglik(params_hat.from_unconstrained(u), data, eta0=eta0, tol=opts.mode_tol,
                              max_iter=opts.mode_max_iter)[0]

    f0 = f(u0)
    E = np.eye(k) * step
    fp = np.array([f(u0 + E[i]) for i in range(k)])
    fm = np.array([f(u0 - E[i]) for i in range(k)])
    H = np.empty((k, k))
    for i in range(k):
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / step ** 2
        for j in range(i):
            fpp = f(u0 + E[i] + E[j])
            fpm = f(u0 + E[i] - E[j])
            fmp = f(u0 - E[i] + E[j])
            fmm = f(u0 - E[i] - E[j])
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * step ** 2)
    ev = np.linalg.eigvalsh(H)
    if ev.min() <= 1e-8 * max(ev.max(), 1e-300):
        return StandardErrors(names, est, nan, None, False,
                              f"observed information not positive definite (min eigenvalue {ev.min():.3g})")
    cov_u = 2.0 * np.linalg.inv(H)

    J = np.empty((len(est), k))
    h = 1e-6
    for i in range(k):
        e = np.zeros(k)
        e[i] = h
        J[:, i] = (params_hat.from_unconstrained(u0 + e).natural_vector()
                   - params_hat.from_unconstrained(u0 - e).natural_vector()) / (2 * h)
    cov = J @ cov_u @ J.T
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return StandardErrors(names, est, se, cov, True, "")
