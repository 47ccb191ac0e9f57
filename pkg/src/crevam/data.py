"""Ingestion, validation, covariate encoding and standardization of cohort data."""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class Schema:
    """Column names of the long-format input file."""

    student_id: str = "student_id"
    year: str = "year"
    teacher_id: str = "teacher_id"
    score: str = "score"
    # None means every remaining column is a covariate
    covariates: tuple[str, ...] | None = None


@dataclass(frozen=True)
class ObservationRow:
    student_id: str
    year: int
    teacher_id: str | None
    score: float | None
    covariates: Mapping[str, str]

    @property
    def r(self) -> int:
        return int(self.score is not None)


@dataclass(frozen=True, eq=False)
class CohortData:
    """Immutable long-format cohort: one entry per (student, year) record.

    Row-level data are stored column-wise.  ``teacher`` holds the index of the
    teacher within ``rosters[year - 1]`` or -1 when the row has no teacher
    link; ``score`` is NaN for a missed measurement.  Covariate values are kept
    as raw text (empty string = missing) and typed at encoding time.
    """

    student_ids: tuple[str, ...]
    T: int
    rosters: tuple[tuple[str, ...], ...]
    student: np.ndarray
    year: np.ndarray
    teacher: np.ndarray
    score: np.ndarray
    covariates: Mapping[str, np.ndarray]
    scale: tuple[float, float] = (0.0, 1.0)
    info: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("student", "year", "teacher", "score"):
            getattr(self, name).setflags(write=False)
        for arr in self.covariates.values():
            arr.setflags(write=False)
        object.__setattr__(self, "covariates", MappingProxyType(dict(self.covariates)))
        object.__setattr__(self, "info", MappingProxyType(dict(self.info)))

    def __eq__(self, other):
        if not isinstance(other, CohortData):
            return NotImplemented
        return (
            self.student_ids == other.student_ids
            and self.T == other.T
            and self.rosters == other.rosters
            and np.array_equal(self.student, other.student)
            and np.array_equal(self.year, other.year)
            and np.array_equal(self.teacher, other.teacher)
            and np.array_equal(self.score, other.score, equal_nan=True)
            and set(self.covariates) == set(other.covariates)
            and all(np.array_equal(self.covariates[k], other.covariates[k]) for k in self.covariates)
            and tuple(self.scale) == tuple(other.scale)
        )

    __hash__ = None

    @property
    def n(self) -> int:
        return len(self.student_ids)

    @property
    def m(self) -> tuple[int, ...]:
        return tuple(len(r) for r in self.rosters)

    @property
    def n_rows(self) -> int:
        return len(self.student)

    @property
    def r(self) -> np.ndarray:
        return (~np.isnan(self.score)).astype(int)

    @cached_property
    def row_index(self) -> np.ndarray:
        """(n, T) array: row holding (student, year), or -1."""
        idx = np.full((self.n, self.T), -1, dtype=int)
        idx[self.student, self.year - 1] = np.arange(self.n_rows)
        return idx

    @cached_property
    def link(self) -> np.ndarray:
        """(n, T) array of teacher roster indices, -1 where absent."""
        out = np.full((self.n, self.T), -1, dtype=int)
        out[self.student, self.year - 1] = self.teacher
        return out

    @cached_property
    def observed(self) -> np.ndarray:
        """(n, T) boolean: score recorded for (student, year)."""
        out = np.zeros((self.n, self.T), dtype=bool)
        out[self.student, self.year - 1] = ~np.isnan(self.score)
        return out

    @property
    def A(self) -> list[tuple[int, ...]]:
        """Observed years per student."""
        return [tuple(int(g) + 1 for g in np.flatnonzero(row)) for row in self.observed]

    @property
    def rows(self) -> list[ObservationRow]:
        out = []
        for k in range(self.n_rows):
            g = int(self.year[k])
            t = int(self.teacher[k])
            s = float(self.score[k])
            out.append(ObservationRow(
                student_id=self.student_ids[self.student[k]],
                year=g,
                teacher_id=self.rosters[g - 1][t] if t >= 0 else None,
                score=None if np.isnan(s) else s,
                covariates={c: str(v[k]) for c, v in self.covariates.items()},
            ))
        return out

    def covariate_rows(self, students: np.ndarray, years: np.ndarray) -> np.ndarray:
        """Row to read covariates from for each (student, year) pair.

        The row of that year when present, else the nearest earlier row,
        else the nearest later one.
        """
        students = np.asarray(students, dtype=int)
        years = np.asarray(years, dtype=int)
        out = np.full(len(students), -1, dtype=int)
        ri = self.row_index
        for k, (i, g) in enumerate(zip(students, years)):
            if ri[i, g - 1] >= 0:
                out[k] = ri[i, g - 1]
                continue
            earlier = ri[i, : g - 1][::-1]
            later = ri[i, g:]
            for cand in (earlier, later):
                hit = cand[cand >= 0]
                if len(hit):
                    out[k] = hit[0]
                    break
        return out

    def with_scores(self, score: np.ndarray, scale: tuple[float, float] | None = None) -> "CohortData":
        return CohortData(
            student_ids=self.student_ids,
            T=self.T,
            rosters=self.rosters,
            student=self.student.copy(),
            year=self.year.copy(),
            teacher=self.teacher.copy(),
            score=np.asarray(score, dtype=float).copy(),
            covariates={k: v.copy() for k, v in self.covariates.items()},
            scale=self.scale if scale is None else scale,
            info=self.info,
        )


def build_cohort(
    records: Iterable[tuple[str, int, str | None, float | None, Mapping[str, str]]],
    T: int | None = None,
    covariate_names: Sequence[str] = (),
    require_first_year: bool = True,
    missing_teacher: str = "retain",
    rosters: Sequence[Sequence[str]] | None = None,
    line_numbers: Sequence[int] | None = None,
) -> CohortData:
    """Validate records and assemble a CohortData.

    ``records`` are (student_id, year, teacher_id, score, covariates) tuples.
    Students and per-year rosters are indexed by first appearance unless
    ``rosters`` is given explicitly.
    """
    if missing_teacher not in ("retain", "drop"):
        raise DataError(f"missing_teacher policy must be 'retain' or 'drop', got {missing_teacher!r}")
    records = list(records)
    if line_numbers is None:
        line_numbers = list(range(1, len(records) + 1))
    if not records:
        raise DataError("no data rows")
    years = [rec[1] for rec in records]
    if T is None:
        T = max(years)
    seen: dict[tuple[str, int], int] = {}
    for rec, line in zip(records, line_numbers):
        sid, g, tid, score, _ = rec
        if not 1 <= g <= T:
            raise DataError(f"line {line}: year {g} outside 1..{T}")
        key = (sid, g)
        if key in seen:
            raise DataError(f"duplicate record for student {sid!r}, year {g} (lines {seen[key]} and {line})")
        seen[key] = line
        if tid is None and score is not None:
            raise DataError(f"line {line}: student {sid!r} year {g} has a score but no teacher link")

    info = {"input_rows": len(records)}
    if require_first_year:
        first = {rec[0] for rec in records if rec[1] == 1}
        kept = [rec for rec in records if rec[0] in first]
        dropped = {rec[0] for rec in records} - first
        info["dropped_students_no_first_year"] = len(dropped)
        if dropped:
            logger.info("dropped %d students without a year-1 record", len(dropped))
        records = kept
    no_link = [rec for rec in records if rec[2] is None]
    info["rows_without_teacher"] = len(no_link)
    if missing_teacher == "drop" and no_link:
        records = [rec for rec in records if rec[2] is not None]
        info["dropped_rows_without_teacher"] = len(no_link)
    if not records:
        raise DataError("no rows left after filtering")

    student_index: dict[str, int] = {}
    for rec in records:
        student_index.setdefault(rec[0], len(student_index))
    if rosters is None:
        roster_lists: list[dict[str, int]] = [dict() for _ in range(T)]
        for rec in records:
            if rec[2] is not None:
                roster_lists[rec[1] - 1].setdefault(rec[2], len(roster_lists[rec[1] - 1]))
    else:
        if len(rosters) != T:
            raise DataError(f"expected {T} rosters, got {len(rosters)}")
        roster_lists = [{t: j for j, t in enumerate(r)} for r in rosters]
    teacher = np.empty(len(records), dtype=int)
    for k, rec in enumerate(records):
        if rec[2] is None:
            teacher[k] = -1
        else:
            try:
                teacher[k] = roster_lists[rec[1] - 1][rec[2]]
            except KeyError:
                raise DataError(f"teacher {rec[2]!r} not in the year-{rec[1]} roster") from None

    covs = {c: np.array([str(rec[4].get(c, "")) for rec in records], dtype=object) for c in covariate_names}
    return CohortData(
        student_ids=tuple(student_index),
        T=int(T),
        rosters=tuple(tuple(r) for r in roster_lists),
        student=np.array([student_index[rec[0]] for rec in records], dtype=int),
        year=np.array([rec[1] for rec in records], dtype=int),
        teacher=teacher,
        score=np.array([np.nan if rec[3] is None else rec[3] for rec in records], dtype=float),
        covariates=covs,
        info=info,
    )


def _read_text(source) -> str:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            raw = fh.read()
    else:
        raw = source.read()
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8-sig")
    return raw


def parse_long_csv(
    source,
    schema: Schema = Schema(),
    T: int | None = None,
    require_first_year: bool = True,
    missing_teacher: str = "retain",
) -> CohortData:
    """Read a long-format CSV (one row per student-year) into a CohortData.

    ``source`` may be a path, a binary stream or a text stream.  An empty
    score cell marks a missed measurement (r = 0).
    """
    reader = csv.reader(io.StringIO(_read_text(source)))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty input: header row missing") from None
    required = [schema.student_id, schema.year, schema.teacher_id, schema.score]
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"missing required columns: {missing}")
    col = {h: k for k, h in enumerate(header)}
    if schema.covariates is None:
        cov_names = [h for h in header if h not in required]
    else:
        cov_names = list(schema.covariates)
        absent = [c for c in cov_names if c not in col]
        if absent:
            raise DataError(f"missing covariate columns: {absent}")

    records = []
    lines = []
    for line, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise DataError(f"line {line}: expected {len(header)} fields, got {len(row)}")
        sid = row[col[schema.student_id]].strip()
        if not sid:
            raise DataError(f"line {line}: empty student id")
        ytext = row[col[schema.year]].strip()
        try:
            yval = float(ytext)
        except ValueError:
            raise DataError(f"line {line}: year {ytext!r} is not an integer") from None
        if not yval.is_integer():
            raise DataError(f"line {line}: year {ytext!r} is not an integer")
        tid = row[col[schema.teacher_id]].strip() or None
        stext = row[col[schema.score]].strip()
        if stext:
            try:
                score = float(stext)
            except ValueError:
                raise DataError(f"line {line}: score {stext!r} is not numeric") from None
            if not np.isfinite(score):
                raise DataError(f"line {line}: score {stext!r} is not finite")
        else:
            score = None
        covs = {c: row[col[c]].strip() for c in cov_names}
        records.append((sid, int(yval), tid, score, covs))
        lines.append(line)
    if T is not None:
        for rec, line in zip(records, lines):
            if not 1 <= rec[1] <= T:
                raise DataError(f"line {line}: year {rec[1]} outside 1..{T}")
    return build_cohort(records, T=T, covariate_names=cov_names, require_first_year=require_first_year,
                        missing_teacher=missing_teacher, line_numbers=lines)


def write_long_csv(cohort: CohortData, dest, schema: Schema = Schema()) -> None:
    """Write ``cohort`` in the format read by :func:`parse_long_csv`."""
    cov_names = list(cohort.covariates)
    own = isinstance(dest, (str, os.PathLike))
    fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema.student_id, schema.year, schema.teacher_id, schema.score] + cov_names)
        for k in range(cohort.n_rows):
            g = int(cohort.year[k])
            t = int(cohort.teacher[k])
            s = cohort.score[k]
            w.writerow(
                [cohort.student_ids[cohort.student[k]], g,
                 cohort.rosters[g - 1][t] if t >= 0 else "",
                 "" if np.isnan(s) else repr(float(s))]
                + [cohort.covariates[c][k] for c in cov_names]
            )
    finally:
        if own:
            fh.close()


def standardize_scores(cohort: CohortData) -> CohortData:
    """Center and scale all observed scores jointly to mean 0, sd 1.

    Uses the population (divide-by-N) standard deviation.  The returned
    cohort's ``scale`` maps standardized values back to the original units:
    ``raw = center + spread * standardized``.
    """
    obs = cohort.score[~np.isnan(cohort.score)]
    if len(np.unique(obs)) < 2:
        raise DataError("standardization needs at least two distinct observed scores")
    center = float(obs.mean())
    spread = float(obs.std())
    if not spread > 0:
        raise DataError("observed scores have zero variance")
    new = (cohort.score - center) / spread
    c0, s0 = cohort.scale
    return cohort.with_scores(new, scale=(c0 + s0 * center, s0 * spread))


# -- covariates -------------------------------------------------------------


@dataclass(frozen=True)
class TermSpec:
    """A declared fixed-effect term.

    For categorical terms, ``levels`` fixes the order (the first level present
    in the data is the reference); ``missing_level`` names the category that
    empty cells map to.
    """

    name: str
    kind: str = "categorical"
    levels: tuple[str, ...] | None = None
    missing_level: str | None = None

    def __post_init__(self):
        if self.kind not in ("categorical", "continuous"):
            raise DataError(f"term {self.name!r}: kind must be categorical or continuous")


@dataclass(frozen=True)
class CovariateEncoding:
    name: str
    kind: str
    levels: tuple[str, ...]
    reference: str | None
    columns: tuple[str, ...]
    span: tuple[int, int]
    missing_level: str | None = None

    @property
    def width(self) -> int:
        return self.span[1] - self.span[0]

    def map_values(self, raw: np.ndarray) -> np.ndarray:
        """Raw text values to levels (categorical) or floats (continuous)."""
        if self.kind == "continuous":
            try:
                return np.array([float(v) for v in raw], dtype=float)
            except ValueError:
                raise DataError(f"covariate {self.name!r} has non-numeric or missing values") from None
        out = np.array([v if v != "" else (self.missing_level or "") for v in raw], dtype=object)
        return out

    def encode(self, raw: np.ndarray) -> np.ndarray:
        vals = self.map_values(raw)
        if self.kind == "continuous":
            return vals[:, None]
        out = np.zeros((len(vals), self.width))
        for k, lev in enumerate(self.levels[1:]):
            out[:, k] = vals == lev
        unknown = set(vals) - set(self.levels)
        if unknown:
            raise DataError(f"covariate {self.name!r}: unknown levels {sorted(unknown)}")
        return out


def encode_covariates(cohort: CohortData, terms: Sequence[TermSpec], start: int = 0) -> list[CovariateEncoding]:
    """Resolve each declared term to its columns in a fixed-effects design.

    Categorical terms drop their reference (first) level; ``start`` offsets
    the column spans.
    """
    out = []
    col = start
    for term in terms:
        if term.name not in cohort.covariates:
            raise DataError(f"unknown covariate {term.name!r}")
        raw = cohort.covariates[term.name]
        if term.kind == "continuous":
            enc = CovariateEncoding(term.name, "continuous", (), None, (term.name,), (col, col + 1))
            enc.map_values(raw)
            out.append(enc)
            col += 1
            continue
        present = [v for v in raw if v != ""]
        if len(present) < len(raw):
            if term.missing_level is None:
                raise DataError(f"covariate {term.name!r} has missing values and no missing_level")
            present.append(term.missing_level)
        seen = set(present)
        if term.levels is not None:
            declared = list(term.levels)
            if term.missing_level is not None and term.missing_level not in declared:
                declared.append(term.missing_level)
            extra = seen - set(declared)
            if extra:
                raise DataError(f"covariate {term.name!r}: undeclared levels {sorted(extra)}")
            levels = tuple(lev for lev in declared if lev in seen)
        else:
            levels = tuple(sorted(seen - {term.missing_level}))
            if term.missing_level in seen:
                levels += (term.missing_level,)
        if len(levels) < 2:
            raise DataError(f"categorical term {term.name!r} has fewer than two levels with data")
        cols = tuple(f"{term.name}[{lev}]" for lev in levels[1:])
        out.append(CovariateEncoding(term.name, "categorical", levels, levels[0], cols,
                                     (col, col + len(cols)), term.missing_level))
        col += len(cols)
    return out


# -- quasi-complete separation ------------------------------------------------


@dataclass(frozen=True)
class LevelCount:
    term: str
    level: str
    n_missing: int
    n_observed: int

    @property
    def flagged(self) -> bool:
        return self.n_missing == 0 or self.n_observed == 0


@dataclass
class SeparationReport:
    counts: list[LevelCount]

    @property
    def flagged(self) -> list[LevelCount]:
        return [c for c in self.counts if c.flagged]

    @property
    def flagged_years(self) -> list[int]:
        return [int(c.level) for c in self.flagged if c.term == "year"]

    @property
    def flagged_covariates(self) -> list[LevelCount]:
        return [c for c in self.flagged if c.term != "year"]

    def describe(self) -> str:
        return "; ".join(
            f"{c.term}={c.level}: {c.n_missing} missing / {c.n_observed} observed" for c in self.flagged
        )


def separation_counts(cohort: CohortData, rows, encodings: Sequence[CovariateEncoding]) -> SeparationReport:
    counts = []
    for g in sorted(set(rows.year.tolist())):
        sel = rows.year == g
        counts.append(LevelCount("year", str(g), int(np.sum(rows.r[sel] == 0)), int(np.sum(rows.r[sel] == 1))))
    for enc in encodings:
        if enc.kind != "categorical":
            continue
        vals = enc.map_values(cohort.covariates[enc.name][rows.cov_row])
        for lev in enc.levels:
            sel = vals == lev
            counts.append(LevelCount(enc.name, lev, int(np.sum(rows.r[sel] == 0)), int(np.sum(rows.r[sel] == 1))))
    return SeparationReport(counts)


def check_separation(cohort: CohortData, attendance_terms: Sequence[CovariateEncoding], mechanism,
                     years: Sequence[int] | None = None) -> SeparationReport:
    """Count (r=0, r=1) attendance rows at every categorical level.

    Levels include the attendance years themselves (each carries its own
    mean).  Any level lacking either outcome is flagged: its probit
    coefficient has no finite maximum likelihood estimate.
    """
    from .design import attendance_rows

    rows = attendance_rows(cohort, mechanism, years)
    return separation_counts(cohort, rows, attendance_terms)
