"""Synthetic cohorts generated from known parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .data import CohortData, TermSpec, build_cohort
from .design import (
    AttendanceMechanism,
    AttendanceRows,
    EtaLayout,
    ModelSpec,
    assemble_G,
    attendance_rows,
    build_designs,
    build_eta_layout,
    default_attendance_years,
)
from .params import ParameterSet


@dataclass
class SimDesign:
    """Cohort size, teacher counts, true parameters and missingness mechanism.

    Students are assigned to each year's teachers at random in balanced
    classes.  For the MAR mechanism, scores at ``attendance_years`` (default
    2..T) are deleted with probability driven by the attendance fixed effects
    alone.
    """

    n: int
    T: int
    m: tuple[int, ...]
    params: ParameterSet
    mechanism: AttendanceMechanism = AttendanceMechanism.MAR
    seed: int = 0
    attendance_years: tuple[int, ...] | None = None
    score_terms: tuple[TermSpec, ...] = ()
    attendance_terms: tuple[TermSpec, ...] = ()

    def __post_init__(self):
        self.mechanism = AttendanceMechanism.parse(self.mechanism)
        self.m = tuple(int(v) for v in self.m)
        if len(self.m) != self.T:
            raise ValueError(f"need {self.T} teacher counts, got {len(self.m)}")
        if any(v < 1 or v > self.n for v in self.m):
            raise ValueError("every year needs between 1 and n teachers")

    @property
    def years(self) -> tuple[int, ...]:
        if self.attendance_years is not None:
            return tuple(self.attendance_years)
        if self.mechanism is AttendanceMechanism.MAR:
            return tuple(range(2, self.T + 1))
        return default_attendance_years(self.mechanism, self.T)

    def with_seed(self, seed: int) -> "SimDesign":
        return SimDesign(self.n, self.T, self.m, self.params, self.mechanism, seed, self.attendance_years,
                         self.score_terms, self.attendance_terms)


@dataclass
class SimTruth:
    eta: np.ndarray
    layout: EtaLayout
    y_complete: np.ndarray
    rows: AttendanceRows | None
    r: np.ndarray
    extra: dict = field(default_factory=dict)


def _normals(rng, size):
    return ndtri(rng.random(size))


def _student_label(i, n):
    return f"s{i + 1:0{len(str(n))}d}"


def generate(design: SimDesign) -> tuple[CohortData, SimTruth]:
    rng = np.random.Generator(np.random.Philox(design.seed))
    n, T = design.n, design.T
    assign = np.empty((n, T), dtype=int)
    for g in range(T):
        assign[:, g] = rng.permutation(np.arange(n) % design.m[g])
    group = np.where(rng.random(n) < 0.5, "A", "B")
    xcov = _normals(rng, n)
    records = []
    for i in range(n):
        covs = {"group": str(group[i]), "x": repr(float(xcov[i]))}
        for g in range(1, T + 1):
            tid = f"T{g}-{assign[i, g - 1] + 1:0{len(str(design.m[g - 1]))}d}"
            records.append((_student_label(i, n), g, tid, 0.0, covs))
    skeleton = build_cohort(records, T=T, covariate_names=("group", "x"))

    years = design.years
    layout = build_eta_layout(skeleton, design.mechanism, years)
    G = assemble_G(design.params, layout)
    eta = G.chol_sparse() @ _normals(rng, layout.q)

    spec = ModelSpec(design.mechanism, design.score_terms, design.attendance_terms,
                     None if design.mechanism is AttendanceMechanism.MAR else years)
    dz = build_designs(skeleton, spec, layout)
    eps = np.sqrt(design.params.sigma2[dz.score_year - 1]) * _normals(rng, len(dz.y))
    y = dz.X @ design.params.beta_score + dz.S @ eta + eps

    score = np.empty(skeleton.n_rows)
    score[dz.score_row] = y
    rows, r = None, np.zeros(0, dtype=int)
    if years:
        row_mech = (AttendanceMechanism.TEACHER_NEXT_YEAR if design.mechanism is AttendanceMechanism.MAR
                    else design.mechanism)
        rows = attendance_rows(skeleton, row_mech, years)
        if design.mechanism is AttendanceMechanism.MAR:
            att_spec = ModelSpec(row_mech, design.score_terms, design.attendance_terms, years)
            att_layout = build_eta_layout(skeleton, row_mech, years)
            lin = build_designs(skeleton, att_spec, att_layout, rows).W @ design.params.beta_attnd
        else:
            lin = dz.W @ design.params.beta_attnd + dz.Z @ eta
        r = (rng.random(len(rows)) < ndtr(lin)).astype(int)
        score[skeleton.row_index[rows.student[r == 0], rows.year[r == 0] - 1]] = np.nan
    cohort = skeleton.with_scores(score)
    truth = SimTruth(eta=eta, layout=layout, y_complete=score.copy(), rows=rows, r=r)
    truth.y_complete[dz.score_row] = y
    return cohort, truth


def mnar_stress(design: SimDesign, severity: float, target: tuple[int, int] = (1, 0)) -> CohortData:
    """Cohort from :func:`generate` with extra, manipulative deletions.

    Students of the designated teacher (``target`` = (year, roster index))
    lose their score in that year with probability
    ``1 - exp(-severity * max(0, -z))`` where ``z`` is the student's
    standardized latent score effect: the weakest students are the likeliest
    to be kept away from the test.
    """
    if severity < 0:
        raise ValueError("severity must be non-negative")
    cohort, truth = generate(design)
    if severity == 0:
        return cohort
    g, j = target
    rng = np.random.Generator(np.random.Philox(design.seed).jumped())
    lay = truth.layout
    z = lay.student_part(truth.eta)[:, 0] / np.sqrt(design.params.gamma_stu[0, 0])
    students = np.flatnonzero(cohort.link[:, g - 1] == j)
    p = 1.0 - np.exp(-severity * np.maximum(0.0, -z[students]))
    hit = students[rng.random(len(students)) < p]
    score = cohort.score.copy()
    score[cohort.row_index[hit, g - 1]] = np.nan
    return cohort.with_scores(score)


def example_params(T: int, mechanism=AttendanceMechanism.MAR, completion: float = 0.6,
                   attendance_years: tuple[int, ...] | None = None, teacher_var: float = 0.08,
                   persistence_var: float = 0.03, lambda_var: float = 0.10, student_var: float = 0.6,
                   sigma2: float = 0.4, lambda_corr: float = 0.5) -> ParameterSet:
    """A plausible standardized-scale parameter set for ``mechanism``.

    Teacher blocks: current-year variance ``teacher_var``, persistence
    variances ``persistence_var`` (correlation 0.3 with the current effect),
    and an attendance effect correlated ``lambda_corr`` with the current
    effect.  Attendance means give marginal completion ``completion`` per
    modeled year (ignoring random effects).
    """
    mechanism = AttendanceMechanism.parse(mechanism)
    if mechanism is AttendanceMechanism.MAR:
        years = tuple(range(2, T + 1)) if attendance_years is None else tuple(attendance_years)
    else:
        years = default_attendance_years(mechanism, T) if attendance_years is None else tuple(attendance_years)
    if mechanism.teacher_effect:
        if mechanism.current_year:
            has_lambda = [g in years for g in range(1, T + 1)]
        else:
            has_lambda = [(g + 1) in years for g in range(1, T + 1)]
    else:
        has_lambda = [False] * T
    gammas = []
    for g in range(1, T + 1):
        K = T - g + 1
        sd = np.sqrt([teacher_var] + [persistence_var] * (K - 1) + ([lambda_var] if has_lambda[g - 1] else []))
        d = len(sd)
        R = np.eye(d)
        for a in range(1, K):
            R[0, a] = R[a, 0] = 0.3
            for b in range(1, a):
                R[a, b] = R[b, a] = 0.3
        if has_lambda[g - 1]:
            R[0, K] = R[K, 0] = lambda_corr
            for a in range(1, K):
                R[a, K] = R[K, a] = 0.5 * lambda_corr
        gammas.append(R * np.outer(sd, sd))
    if mechanism.student_effect:
        gamma_stu = np.array([[student_var, 0.3], [0.3, 0.5]])
    else:
        gamma_stu = np.array([[student_var]])
    beta_attnd = np.full(len(years), ndtri(completion)) if years else np.zeros(0)
    return ParameterSet(
        beta_score=np.linspace(0.0, 0.2, T),
        sigma2=np.full(T, sigma2),
        gamma_stu=gamma_stu,
        gammas=gammas,
        beta_attnd=beta_attnd,
    )
