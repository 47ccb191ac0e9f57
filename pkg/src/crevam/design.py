"""Random-effects layout, covariance assembly and design matrices."""

from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .data import (
    CohortData,
    CovariateEncoding,
    DataError,
    SeparationReport,
    TermSpec,
    encode_covariates,
    separation_counts,
)

logger = logging.getLogger(__name__)


class DesignError(ValueError):
    pass


class SeparationError(DesignError):
    """An attendance fixed-effect level has only one outcome class."""


class AttendanceMechanism(enum.Enum):
    MAR = "MAR"
    TEACHER_NEXT_YEAR = "MNAR-t"
    TEACHER_CURRENT_YEAR = "MNAR-tc"
    STUDENT_ONLY = "MNAR-s"
    TEACHER_STUDENT_NEXT_YEAR = "MNAR-b"
    TEACHER_STUDENT_CURRENT_YEAR = "MNAR-bc"

    @property
    def label(self) -> str:
        return self.value

    @property
    def teacher_effect(self) -> bool:
        return self in (AttendanceMechanism.TEACHER_NEXT_YEAR, AttendanceMechanism.TEACHER_CURRENT_YEAR,
                        AttendanceMechanism.TEACHER_STUDENT_NEXT_YEAR,
                        AttendanceMechanism.TEACHER_STUDENT_CURRENT_YEAR)

    @property
    def student_effect(self) -> bool:
        return self in (AttendanceMechanism.STUDENT_ONLY, AttendanceMechanism.TEACHER_STUDENT_NEXT_YEAR,
                        AttendanceMechanism.TEACHER_STUDENT_CURRENT_YEAR)

    @property
    def current_year(self) -> bool:
        return self in (AttendanceMechanism.TEACHER_CURRENT_YEAR, AttendanceMechanism.TEACHER_STUDENT_CURRENT_YEAR)

    @classmethod
    def parse(cls, text: "str | AttendanceMechanism") -> "AttendanceMechanism":
        if isinstance(text, cls):
            return text
        key = str(text).strip().replace("_", "").replace("-", "").lower()
        aliases = {
            "mar": cls.MAR,
            "mnart": cls.TEACHER_NEXT_YEAR, "teachernextyear": cls.TEACHER_NEXT_YEAR,
            "mnartc": cls.TEACHER_CURRENT_YEAR, "teachercurrentyear": cls.TEACHER_CURRENT_YEAR,
            "mnars": cls.STUDENT_ONLY, "studentonly": cls.STUDENT_ONLY,
            "mnarb": cls.TEACHER_STUDENT_NEXT_YEAR, "teacherandstudentnextyear": cls.TEACHER_STUDENT_NEXT_YEAR,
            "mnarbc": cls.TEACHER_STUDENT_CURRENT_YEAR,
            "teacherandstudentcurrentyear": cls.TEACHER_STUDENT_CURRENT_YEAR,
        }
        try:
            return aliases[key]
        except KeyError:
            raise DesignError(f"unknown attendance mechanism {text!r}") from None


def default_attendance_years(mechanism: AttendanceMechanism, T: int) -> tuple[int, ...]:
    if mechanism is AttendanceMechanism.MAR:
        return ()
    if mechanism.current_year:
        return tuple(range(1, T + 1))
    return tuple(range(2, T + 1))


@dataclass(frozen=True)
class ModelSpec:
    mechanism: AttendanceMechanism = AttendanceMechanism.MAR
    score_terms: tuple[TermSpec, ...] = ()
    attendance_terms: tuple[TermSpec, ...] = ()
    # None: the mechanism's default years, silently pruned of years without
    # missing outcomes.  Explicit years are never pruned.
    attendance_years: tuple[int, ...] | None = None
    T: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mechanism", AttendanceMechanism.parse(self.mechanism))


# -- layout -----------------------------------------------------------------


@dataclass(frozen=True)
class Block:
    kind: str  # "student" or "teacher"
    owner: int  # student index, or roster index within the year
    year: int | None
    start: int
    dim: int
    labels: tuple[str, ...]

    @property
    def stop(self) -> int:
        return self.start + self.dim


@dataclass(frozen=True)
class EtaLayout:
    """Ordering of the random-effects vector.

    All student blocks come first (score effect, then attendance effect when
    present), then teacher blocks by year and roster index.  A year-g teacher
    block holds the effects on years g..T followed by the attendance effect.
    """

    n: int
    T: int
    m: tuple[int, ...]
    student_dim: int
    has_lambda: tuple[bool, ...]
    mechanism: AttendanceMechanism = AttendanceMechanism.MAR

    def K(self, g: int) -> int:
        return self.T - g + 1

    def teacher_dim(self, g: int) -> int:
        return self.K(g) + int(self.has_lambda[g - 1])

    @property
    def n_student_coords(self) -> int:
        return self.n * self.student_dim

    @cached_property
    def teacher_start(self) -> tuple[int, ...]:
        out = []
        pos = self.n_student_coords
        for g in range(1, self.T + 1):
            out.append(pos)
            pos += self.m[g - 1] * self.teacher_dim(g)
        return tuple(out)

    @property
    def q(self) -> int:
        return self.n_student_coords + sum(self.m[g - 1] * self.teacher_dim(g) for g in range(1, self.T + 1))

    def student_coord(self, i, attendance: bool = False):
        return np.asarray(i) * self.student_dim + (1 if attendance else 0)

    def theta_coord(self, g: int, j, t: int):
        return self.teacher_start[g - 1] + np.asarray(j) * self.teacher_dim(g) + (t - g)

    def lambda_coord(self, g: int, j):
        if not self.has_lambda[g - 1]:
            raise DesignError(f"year-{g} teachers carry no attendance effect")
        return self.teacher_start[g - 1] + np.asarray(j) * self.teacher_dim(g) + self.K(g)

    def student_labels(self) -> tuple[str, ...]:
        return ("score", "attend")[: self.student_dim]

    def teacher_labels(self, g: int) -> tuple[str, ...]:
        labels = tuple(f"on{t}" for t in range(g, self.T + 1))
        return labels + (("attend",) if self.has_lambda[g - 1] else ())

    @cached_property
    def blocks(self) -> tuple[Block, ...]:
        out = []
        slab = self.student_labels()
        for i in range(self.n):
            out.append(Block("student", i, None, i * self.student_dim, self.student_dim, slab))
        for g in range(1, self.T + 1):
            d = self.teacher_dim(g)
            tlab = self.teacher_labels(g)
            for j in range(self.m[g - 1]):
                out.append(Block("teacher", j, g, self.teacher_start[g - 1] + j * d, d, tlab))
        return tuple(out)

    def student_part(self, v: np.ndarray) -> np.ndarray:
        return v[: self.n_student_coords].reshape(self.n, self.student_dim)

    def teacher_part(self, v: np.ndarray, g: int) -> np.ndarray:
        start = self.teacher_start[g - 1]
        d = self.teacher_dim(g)
        return v[start: start + self.m[g - 1] * d].reshape(self.m[g - 1], d)


def build_eta_layout(cohort: CohortData, mechanism, attendance_years: Sequence[int] | None = None) -> EtaLayout:
    mechanism = AttendanceMechanism.parse(mechanism)
    T = cohort.T
    years = default_attendance_years(mechanism, T) if attendance_years is None else tuple(attendance_years)
    if mechanism.teacher_effect:
        if mechanism.current_year:
            has_lambda = tuple(g in years for g in range(1, T + 1))
        else:
            has_lambda = tuple((g + 1) in years for g in range(1, T + 1))
    else:
        has_lambda = (False,) * T
    return EtaLayout(
        n=cohort.n,
        T=T,
        m=cohort.m,
        student_dim=2 if mechanism.student_effect else 1,
        has_lambda=has_lambda,
        mechanism=mechanism,
    )


# -- attendance rows ------------------------------------------------------


@dataclass(frozen=True)
class AttendanceRows:
    """Rows of the attendance submodel, each modeling r for (student, year).

    ``teacher_year``/``teacher`` identify the classroom whose attendance
    effect enters the row (0 / -1 when none).
    """

    student: np.ndarray
    year: np.ndarray
    teacher_year: np.ndarray
    teacher: np.ndarray
    r: np.ndarray
    cov_row: np.ndarray

    def __len__(self):
        return len(self.student)

    def select(self, mask: np.ndarray) -> "AttendanceRows":
        return AttendanceRows(*(getattr(self, f)[mask] for f in
                                ("student", "year", "teacher_year", "teacher", "r", "cov_row")))


def attendance_rows(cohort: CohortData, mechanism, years: Sequence[int] | None = None) -> AttendanceRows:
    """Enumerate attendance rows for ``mechanism``.

    Next-year mechanisms model r at year t for every student with a year t-1
    teacher link (year 1, if requested, covers every student and carries no
    teacher effect).  Current-year mechanisms model r at year t for every
    student with a year-t teacher link.  Student-only models r at each year
    for every student.
    """
    mechanism = AttendanceMechanism.parse(mechanism)
    if mechanism is AttendanceMechanism.MAR:
        raise DesignError("the MAR mechanism has no attendance rows")
    T = cohort.T
    years = default_attendance_years(mechanism, T) if years is None else tuple(sorted(set(years)))
    for t in years:
        if not 1 <= t <= T:
            raise DesignError(f"attendance year {t} outside 1..{T}")
    link = cohort.link
    obs = cohort.observed
    everyone = np.arange(cohort.n)
    cols = {k: [] for k in ("student", "year", "teacher_year", "teacher")}
    for t in years:
        if mechanism is AttendanceMechanism.STUDENT_ONLY:
            stu, ty, tj = everyone, 0, np.full(cohort.n, -1)
        elif mechanism.current_year:
            stu = np.flatnonzero(link[:, t - 1] >= 0)
            ty, tj = t, link[stu, t - 1]
        elif t == 1:
            stu, ty, tj = everyone, 0, np.full(cohort.n, -1)
        else:
            stu = np.flatnonzero(link[:, t - 2] >= 0)
            ty, tj = t - 1, link[stu, t - 2]
        cols["student"].append(stu)
        cols["year"].append(np.full(len(stu), t))
        cols["teacher_year"].append(np.full(len(stu), ty))
        cols["teacher"].append(np.asarray(tj))
    if not cols["student"] or sum(len(s) for s in cols["student"]) == 0:
        raise DesignError(f"mechanism {mechanism.label} has no attendance rows for years {years}")
    student = np.concatenate(cols["student"]).astype(int)
    year = np.concatenate(cols["year"]).astype(int)
    teacher = np.concatenate(cols["teacher"]).astype(int)
    teacher_year = np.where(teacher >= 0, np.concatenate(cols["teacher_year"]), 0).astype(int)
    return AttendanceRows(
        student=student,
        year=year,
        teacher_year=teacher_year,
        teacher=teacher,
        r=obs[student, year - 1].astype(int),
        cov_row=cohort.covariate_rows(student, year),
    )


# -- design matrices --------------------------------------------------------


@dataclass
class DesignMatrices:
    """Score-side (X, S) and attendance-side (W, Z) designs.

    Score rows follow cohort row order restricted to observed scores;
    attendance rows follow :func:`attendance_rows`.
    """

    X: np.ndarray
    S: sp.csr_matrix
    y: np.ndarray
    score_student: np.ndarray
    score_year: np.ndarray
    score_row: np.ndarray
    W: np.ndarray
    Z: sp.csr_matrix
    r: np.ndarray
    att: AttendanceRows | None
    x_names: list[str]
    w_names: list[str]

    @property
    def S1(self) -> sp.csr_matrix:
        return self.S[:, : self._n_student_coords]

    @property
    def S2(self) -> sp.csr_matrix:
        return self.S[:, self._n_student_coords:]

    _n_student_coords: int = 0


def _fixed_design(cohort, years_present, row_years, cov_rows, encodings, prefix):
    names = [f"{prefix}[{g}]" for g in years_present]
    cols = [(row_years == g).astype(float) for g in years_present]
    M = np.column_stack(cols) if cols else np.zeros((len(row_years), 0))
    for enc in encodings:
        M = np.hstack([M, enc.encode(cohort.covariates[enc.name][cov_rows])])
        names += [f"{prefix[-1]}:{c}" for c in enc.columns]
    return M, names


def build_designs(
    cohort: CohortData,
    spec: ModelSpec,
    layout: EtaLayout,
    rows: AttendanceRows | None = None,
    score_encodings: Sequence[CovariateEncoding] | None = None,
    attendance_encodings: Sequence[CovariateEncoding] | None = None,
) -> DesignMatrices:
    mech = layout.mechanism
    if score_encodings is None:
        score_encodings = encode_covariates(cohort, spec.score_terms, start=cohort.T)
    obs_rows = np.flatnonzero(~np.isnan(cohort.score))
    stu = cohort.student[obs_rows]
    yr = cohort.year[obs_rows]
    X, x_names = _fixed_design(cohort, range(1, cohort.T + 1), yr, obs_rows, score_encodings, "mu_y")

    link = cohort.link
    if np.any(link >= np.array(cohort.m)[None, :]):
        raise DesignError("teacher link to an unknown roster entry")
    ri, ci = [np.arange(len(obs_rows))], [layout.student_coord(stu)]
    for g in range(1, cohort.T + 1):
        sel = np.flatnonzero((yr >= g) & (link[stu, g - 1] >= 0))
        j = link[stu[sel], g - 1]
        ri.append(sel)
        ci.append(layout.teacher_start[g - 1] + j * layout.teacher_dim(g) + (yr[sel] - g))
    ri = np.concatenate(ri)
    ci = np.concatenate(ci)
    S = sp.csr_matrix((np.ones(len(ri)), (ri, ci)), shape=(len(obs_rows), layout.q))
    S.sort_indices()

    if mech is AttendanceMechanism.MAR:
        W = np.zeros((0, 0))
        Z = sp.csr_matrix((0, layout.q))
        r = np.zeros(0, dtype=int)
        w_names: list[str] = []
        rows = None
    else:
        if rows is None:
            rows = attendance_rows(cohort, mech, spec.attendance_years)
        if attendance_encodings is None:
            n_years = len(set(rows.year.tolist()))
            attendance_encodings = encode_covariates(cohort, spec.attendance_terms, start=n_years)
        W, w_names = _fixed_design(cohort, sorted(set(rows.year.tolist())), rows.year, rows.cov_row,
                                   attendance_encodings, "mu_r")
        ri, ci = [], []
        if mech.student_effect:
            ri.append(np.arange(len(rows)))
            ci.append(layout.student_coord(rows.student, attendance=True))
        if mech.teacher_effect:
            for g in range(1, cohort.T + 1):
                if not layout.has_lambda[g - 1]:
                    continue
                sel = np.flatnonzero((rows.teacher_year == g) & (rows.teacher >= 0))
                ri.append(sel)
                ci.append(layout.lambda_coord(g, rows.teacher[sel]))
        ri = np.concatenate(ri) if ri else np.zeros(0, dtype=int)
        ci = np.concatenate(ci) if ci else np.zeros(0, dtype=int)
        Z = sp.csr_matrix((np.ones(len(ri)), (ri, ci)), shape=(len(rows), layout.q))
        Z.sort_indices()
        r = rows.r.copy()

    return DesignMatrices(
        X=X, S=S, y=cohort.score[obs_rows].copy(), score_student=stu, score_year=yr, score_row=obs_rows,
        W=W, Z=Z, r=r, att=rows, x_names=x_names, w_names=w_names,
        _n_student_coords=layout.n_student_coords,
    )


def dump_designs(designs: DesignMatrices, directory: str) -> None:
    """Write X, S, W, Z as coordinate-format text (row col value per line)."""
    os.makedirs(directory, exist_ok=True)
    for name in ("X", "S", "W", "Z"):
        M = sp.coo_matrix(getattr(designs, name))
        with open(os.path.join(directory, f"{name}.coo"), "w") as fh:
            fh.write(f"# {M.shape[0]} {M.shape[1]}\n")
            for i, j, v in zip(M.row, M.col, M.data):
                fh.write(f"{i} {j} {v!r}\n")


# -- covariance -------------------------------------------------------------


class BlockDiagonalCov:
    """G = blockdiag(Gamma_stu x n, Gamma_1 x m_1, ..., Gamma_T x m_T).

    Only the T + 1 distinct blocks are factorized; nothing is densified.
    """

    def __init__(self, gamma_stu: np.ndarray, gammas: Sequence[np.ndarray], layout: EtaLayout):
        self.layout = layout
        self.gamma_stu = np.atleast_2d(gamma_stu)
        self.gammas = [np.atleast_2d(g) for g in gammas]
        if self.gamma_stu.shape != (layout.student_dim,) * 2:
            raise DesignError(f"Gamma_stu has shape {self.gamma_stu.shape}, layout needs {layout.student_dim}")
        for g in range(1, layout.T + 1):
            d = layout.teacher_dim(g)
            if self.gammas[g - 1].shape != (d, d):
                raise DesignError(f"Gamma_{g} has shape {self.gammas[g - 1].shape}, layout needs {d}x{d}")
        self._chol = []
        self._inv = []
        for name, gam in [("Gamma_stu", self.gamma_stu)] + [(f"Gamma_{g}", m) for g, m in
                                                             enumerate(self.gammas, start=1)]:
            try:
                L = np.linalg.cholesky(gam)
            except np.linalg.LinAlgError:
                raise DesignError(f"{name} is not positive definite") from None
            self._chol.append(L)
            Linv = np.linalg.inv(L)
            self._inv.append(Linv.T @ Linv)

    def logdet(self) -> float:
        lay = self.layout
        out = lay.n * 2 * np.sum(np.log(np.diag(self._chol[0])))
        for g in range(1, lay.T + 1):
            out += lay.m[g - 1] * 2 * np.sum(np.log(np.diag(self._chol[g])))
        return float(out)

    def quad_inv(self, eta: np.ndarray) -> float:
        """eta' G^{-1} eta."""
        lay = self.layout
        u = lay.student_part(eta)
        out = np.einsum("ia,ab,ib->", u, self._inv[0], u)
        for g in range(1, lay.T + 1):
            v = lay.teacher_part(eta, g)
            out += np.einsum("ia,ab,ib->", v, self._inv[g], v)
        return float(out)

    def inv_times(self, eta: np.ndarray) -> np.ndarray:
        lay = self.layout
        parts = [(lay.student_part(eta) @ self._inv[0]).ravel()]
        for g in range(1, lay.T + 1):
            parts.append((lay.teacher_part(eta, g) @ self._inv[g]).ravel())
        return np.concatenate(parts)

    def inv_sparse(self) -> sp.csr_matrix:
        lay = self.layout
        parts = [sp.kron(sp.identity(lay.n), self._inv[0])]
        for g in range(1, lay.T + 1):
            if lay.m[g - 1]:
                parts.append(sp.kron(sp.identity(lay.m[g - 1]), self._inv[g]))
        return sp.block_diag(parts, format="csr")

    def chol_sparse(self) -> sp.csr_matrix:
        """Lower Cholesky factor L of G (G = L L')."""
        lay = self.layout
        parts = [sp.kron(sp.identity(lay.n), self._chol[0])]
        for g in range(1, lay.T + 1):
            if lay.m[g - 1]:
                parts.append(sp.kron(sp.identity(lay.m[g - 1]), self._chol[g]))
        return sp.block_diag(parts, format="csr")

    def block(self, k: int) -> np.ndarray:
        """Covariance block k (0 = students, g = year-g teachers)."""
        return self.gamma_stu if k == 0 else self.gammas[k - 1]

    def dense(self) -> np.ndarray:
        lay = self.layout
        parts = [np.kron(np.eye(lay.n), self.gamma_stu)]
        for g in range(1, lay.T + 1):
            parts.append(np.kron(np.eye(lay.m[g - 1]), self.gammas[g - 1]))
        from scipy.linalg import block_diag

        return block_diag(*parts)


def assemble_G(params, layout: EtaLayout) -> BlockDiagonalCov:
    return BlockDiagonalCov(params.gamma_stu, params.gammas, layout)


# -- full model assembly ------------------------------------------------------


@dataclass
class ModelData:
    """Everything a fit needs that does not depend on the parameters."""

    cohort: CohortData
    spec: ModelSpec
    layout: EtaLayout
    designs: DesignMatrices
    score_encodings: list[CovariateEncoding]
    attendance_encodings: list[CovariateEncoding]
    attendance_years: tuple[int, ...]
    separation: SeparationReport | None = None
    dropped_years: tuple[int, ...] = ()
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def mechanism(self) -> AttendanceMechanism:
        return self.layout.mechanism

    @property
    def has_attendance(self) -> bool:
        return self.mechanism is not AttendanceMechanism.MAR

    @cached_property
    def score_year_rows(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.designs.score_year == g) for g in range(1, self.layout.T + 1)]

    @cached_property
    def StS_by_year(self) -> list[sp.csr_matrix]:
        S = self.designs.S
        out = []
        for rows in self.score_year_rows:
            Sg = S[rows]
            out.append((Sg.T @ Sg).tocsr())
        return out


def build_model(cohort: CohortData, spec: ModelSpec) -> ModelData:
    """Resolve attendance years, check separation, and build all designs.

    With default attendance years, a year whose rows are all observed (or all
    missing) is dropped with a warning.  Explicitly requested years and
    covariate levels lacking either outcome raise :class:`SeparationError`.
    """
    if spec.T is not None and spec.T != cohort.T:
        raise DesignError(f"model horizon T={spec.T} does not match the cohort's T={cohort.T}")
    mech = spec.mechanism
    score_enc = encode_covariates(cohort, spec.score_terms, start=cohort.T)
    report = None
    dropped: tuple[int, ...] = ()
    if mech is AttendanceMechanism.MAR:
        years: tuple[int, ...] = ()
        rows = None
        att_enc: list[CovariateEncoding] = []
    else:
        explicit = spec.attendance_years is not None
        years = tuple(sorted(set(spec.attendance_years))) if explicit else default_attendance_years(mech, cohort.T)
        rows = attendance_rows(cohort, mech, years)
        att_enc = encode_covariates(cohort, spec.attendance_terms, start=len(years))
        report = separation_counts(cohort, rows, att_enc)
        bad_years = report.flagged_years
        if bad_years:
            if explicit:
                raise SeparationError(
                    f"quasi-complete separation in the attendance model: {report.describe()}")
            logger.warning("dropping attendance years without both outcomes: %s (%s)", bad_years,
                           report.describe())
            dropped = tuple(bad_years)
            years = tuple(g for g in years if g not in bad_years)
            if not years:
                raise SeparationError(f"no attendance year has both outcomes: {report.describe()}")
            rows = attendance_rows(cohort, mech, years)
            att_enc = encode_covariates(cohort, spec.attendance_terms, start=len(years))
            report = separation_counts(cohort, rows, att_enc)
        if report.flagged:
            raise SeparationError(f"quasi-complete separation in the attendance model: {report.describe()}")
        if mech.teacher_effect and not np.any(rows.teacher >= 0):
            raise DesignError("no attendance row carries a teacher link")
        if cohort.info.get("rows_without_teacher") and mech.teacher_effect:
            n_excl = int(np.sum((cohort.teacher < 0)))
            logger.info("%d rows without a teacher link contribute no teacher attendance effect", n_excl)
    layout = build_eta_layout(cohort, mech, years)
    designs = build_designs(cohort, spec, layout, rows, score_enc, att_enc)
    return ModelData(
        cohort=cohort, spec=spec, layout=layout, designs=designs, score_encodings=score_enc,
        attendance_encodings=att_enc, attendance_years=years, separation=report, dropped_years=dropped,
    )


__all__ = [
    "AttendanceMechanism", "ModelSpec", "EtaLayout", "Block", "AttendanceRows", "DesignMatrices",
    "BlockDiagonalCov", "ModelData", "DesignError", "SeparationError", "DataError",
    "build_eta_layout", "attendance_rows", "build_designs", "assemble_G", "build_model", "dump_designs",
    "default_attendance_years",
]
