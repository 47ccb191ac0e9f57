"""Sensitivity analysis across attendance mechanisms and its tables."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .data import CohortData, TermSpec
from .design import AttendanceMechanism, DesignError, ModelSpec
from .estimation import EstimationError, FitOptions, FitResult, ci_label, eblup_table, fit
from .likelihood import ModeSearchError

logger = logging.getLogger(__name__)

CI_LABELS = ("-", "0", "+")
DEFAULT_MECHANISMS = ("MAR", "MNAR-t", "MNAR-s", "MNAR-b")


class ReportError(ValueError):
    pass


def _pair(a, b, min_len):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ReportError(f"effect vectors must be 1-d and matched, got {a.shape} and {b.shape}")
    if len(a) < min_len:
        raise ReportError(f"need at least {min_len} matched effects, got {len(a)}")
    return a, b


def effect_correlation(a, b) -> float | None:
    """Pearson correlation, or None when either vector is constant."""
    a, b = _pair(a, b, 3)
    da, db = a - a.mean(), b - b.mean()
    sa, sb = float(np.sqrt(da @ da)), float(np.sqrt(db @ db))
    if sa == 0.0 or sb == 0.0:
        return None
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def rank_correlation(a, b) -> float | None:
    a, b = _pair(a, b, 3)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    return float(spearmanr(a, b).statistic)


def quartile_boundaries(N: int) -> tuple[int, int, int]:
    """Ranks (1-based) closing the first three quartiles."""
    return math.ceil(N / 4), math.ceil(N / 2), math.ceil(3 * N / 4)


def quartiles(v) -> np.ndarray:
    """Quartile index 0..3 of each entry by ascending rank; ties keep input order."""
    v = np.asarray(v, dtype=float)
    N = len(v)
    rank = np.empty(N, dtype=int)
    rank[np.argsort(v, kind="stable")] = np.arange(1, N + 1)
    return np.searchsorted(np.array(quartile_boundaries(N)), rank, side="left")


def quartile_crosstab(a, b) -> np.ndarray:
    """4 x 4 counts of (quartile under ``a``, quartile under ``b``)."""
    a, b = _pair(a, b, 4)
    out = np.zeros((4, 4), dtype=int)
    np.add.at(out, (quartiles(a), quartiles(b)), 1)
    return out


def quartile_cutpoints(v) -> list[float]:
    """Effect values at the quartile boundary ranks."""
    s = np.sort(np.asarray(v, dtype=float), kind="stable")
    return [float(s[k - 1]) for k in quartile_boundaries(len(s))]


def ci_classification(lower, upper) -> list[str]:
    return [ci_label(float(lo), float(hi)) for lo, hi in zip(lower, upper)]


def ci_crosstab(labels_a: Sequence[str], labels_b: Sequence[str]) -> np.ndarray:
    """3 x 3 counts over (-, 0, +) with ``labels_a`` on rows."""
    if len(labels_a) != len(labels_b):
        raise ReportError("label vectors differ in length")
    idx = {k: i for i, k in enumerate(CI_LABELS)}
    out = np.zeros((3, 3), dtype=int)
    for x, y in zip(labels_a, labels_b):
        out[idx[x], idx[y]] += 1
    return out


def gamma_correlation(gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    d = np.diag(gamma)
    if np.any(d <= 0):
        raise ReportError("covariance block has a non-positive diagonal entry")
    s = np.sqrt(d)
    R = gamma / np.outer(s, s)
    R = np.clip(0.5 * (R + R.T), -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return R


# -- sensitivity ------------------------------------------------------------------


@dataclass(frozen=True)
class EffectSelector:
    """Year-``g`` teachers' effect on year ``t`` (or on attendance)."""

    g: int = 1
    t: int | None = None
    attend: bool = False

    def resolve(self, T: int) -> "EffectSelector":
        if self.attend:
            return self
        t = self.t if self.t is not None else min(self.g + 1, T)
        if not self.g <= t <= T:
            raise ReportError(f"no effect of year-{self.g} teachers on year {t}")
        return EffectSelector(self.g, t, False)

    @property
    def label(self) -> str:
        return f"{self.g} on attendance" if self.attend else f"{self.g} on {self.t}"


@dataclass
class ModelSummary:
    mechanism: str
    status: str  # "ok", "not converged" or "failed"
    message: str = ""
    neg2loglik: float | None = None
    iterations: int = 0
    estimates: dict = field(default_factory=dict)
    se: dict = field(default_factory=dict)


@dataclass
class SensitivityReport:
    summaries: dict[str, ModelSummary]
    fits: dict[str, FitResult]
    selector: EffectSelector
    teacher_ids: list[str]
    vectors: dict[str, np.ndarray]
    labels: dict[str, list[str]]
    rho: dict[str, float | None]
    spearman: dict[str, float | None]
    quartile_tables: dict[str, np.ndarray]
    ci_tables: dict[str, np.ndarray]
    gamma_correlations: dict[str, dict[str, np.ndarray]]
    baseline: str = "MAR"

    @property
    def complete(self) -> bool:
        return all(s.status == "ok" for s in self.summaries.values())


def _summarize(mech: str, fit_: FitResult | None, err: Exception | None) -> ModelSummary:
    if fit_ is None:
        return ModelSummary(mech, "failed", f"{type(err).__name__}: {err}")
    se = fit_.se.as_dict() if fit_.se is not None else {}
    return ModelSummary(mech, "ok" if fit_.converged else "not converged",
                        "" if fit_.converged else "iteration cap reached",
                        fit_.neg2loglik, fit_.iterations, fit_.estimates(), se)


def run_sensitivity(
    cohort: CohortData,
    mechanisms: Sequence[str] = DEFAULT_MECHANISMS,
    score_terms: Sequence[TermSpec] = (),
    attendance_terms: Sequence[TermSpec] = (),
    options: FitOptions | None = None,
    selector: EffectSelector = EffectSelector(),
    baseline: str = "MAR",
    workers: int = 1,
) -> SensitivityReport:
    """Fit each mechanism and compare its designated effect vector to the baseline's.

    A model that fails to fit is reported with status "failed" and left out of
    the comparisons; the rest of the report is still assembled.
    """
    mechs = [AttendanceMechanism.parse(m).value for m in mechanisms]
    base = AttendanceMechanism.parse(baseline).value
    if base not in mechs:
        mechs.insert(0, base)
    sel = selector.resolve(cohort.T)

    def run(mech):
        spec = ModelSpec(mech, tuple(score_terms), tuple(attendance_terms))
        try:
            return fit(cohort, spec, options), None
        except (DesignError, EstimationError, ModeSearchError, np.linalg.LinAlgError) as exc:
            logger.warning("%s fit failed: %s", mech, exc)
            return None, exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, mechs))
    else:
        results = [run(m) for m in mechs]

    fits = {m: f for m, (f, _) in zip(mechs, results) if f is not None}
    summaries = {m: _summarize(m, f, e) for m, (f, e) in zip(mechs, results)}
    vectors, labels, gcor = {}, {}, {}
    for m, f in fits.items():
        if sel.attend and not f.layout.has_lambda[sel.g - 1]:
            continue
        val, sd = f.effect_vector(sel.g, sel.t, sel.attend)
        vectors[m] = val
        labels[m] = ci_classification(val - 1.6448536269514722 * sd, val + 1.6448536269514722 * sd)
        gcor[m] = {name: gamma_correlation(gam) for name, gam in f.params.blocks()}
    rho, rs, qt, ct = {}, {}, {}, {}
    if base in vectors:
        for m in vectors:
            if m == base:
                continue
            rho[m] = effect_correlation(vectors[m], vectors[base])
            rs[m] = rank_correlation(vectors[m], vectors[base])
            if len(vectors[m]) >= 4:
                qt[m] = quartile_crosstab(vectors[base], vectors[m])
            ct[m] = ci_crosstab(labels[base], labels[m])
    return SensitivityReport(summaries, fits, sel, list(cohort.rosters[sel.g - 1]), vectors, labels, rho, rs,
                             qt, ct, gcor, base)


# -- serialization ------------------------------------------------------------------


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if np.isfinite(x) else None


def params_payload(fit_: FitResult) -> dict:
    """Machine-readable estimates, SEs, and the yearly means on the raw score scale."""
    est = fit_.estimates()
    se = fit_.se.as_dict() if fit_.se is not None else {}
    center, spread = fit_.model.cohort.scale
    raw = {}
    for g in range(1, fit_.layout.T + 1):
        k = f"mu_y[{g}]"
        if k in est:
            raw[k] = center + spread * est[k]
            if se.get(k) is not None:
                raw[k + ":se"] = spread * se[k]
    return {
        "mechanism": fit_.model.mechanism.value,
        "attendance_years": list(fit_.model.attendance_years),
        "dropped_attendance_years": list(fit_.model.dropped_years),
        "neg2loglik": fit_.neg2loglik,
        "converged": fit_.converged,
        "iterations": fit_.iterations,
        "monotone_violations": fit_.monotone_violations,
        "estimates": {k: {"value": v, "se": _num(se.get(k))} for k, v in est.items()},
        "se_diagnostic": fit_.se.diagnostic if fit_.se is not None else "not computed",
        "raw_scale": {"center": center, "spread": spread, "means": raw},
        "params": fit_.params.to_dict(),
    }


def write_eblups(fit_: FitResult, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["effect_id", "type", "owner", "year", "component", "value", "sd", "lower", "upper",
                    "classification"])
        for e in eblup_table(fit_):
            w.writerow([e.effect_id, e.kind, e.owner, "" if e.year is None else e.year, e.component,
                        repr(e.value), repr(e.sd), repr(e.lower), repr(e.upper), e.label])


def _write_table(path, table, row_labels, col_labels, corner):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([corner, *col_labels])
        for lab, row in zip(row_labels, table):
            w.writerow([lab, *[int(x) for x in row]])


def summary_text(payloads: dict[str, dict], rho: dict | None = None) -> str:
    """Estimates side by side, SEs in parentheses, with -2 loglik and rho rows.

    ``payloads`` maps a model label to :func:`params_payload` output.
    """
    mechs = list(payloads)
    names: list[str] = []
    for pl in payloads.values():
        for k in pl["estimates"]:
            if k not in names:
                names.append(k)
    width = 22

    def cell(pl, k):
        e = pl["estimates"].get(k)
        if e is None:
            return ""
        return f"{e['value']:.3f}" + (f" ({e['se']:.3f})" if e.get("se") is not None else "")

    lines = ["Parameter".ljust(18) + "".join(m.rjust(width) for m in mechs)]
    for k in names:
        lines.append(k.ljust(18) + "".join(cell(payloads[m], k).rjust(width) for m in mechs))
    lines.append("-2 loglik".ljust(18) + "".join(f"{payloads[m]['neg2loglik']:.2f}".rjust(width) for m in mechs))
    lines.append("converged".ljust(18) + "".join(str(payloads[m]["converged"]).rjust(width) for m in mechs))
    if rho is not None:
        row = []
        for m in mechs:
            v = rho.get(m)
            row.append(("" if m not in rho else "NA" if v is None else f"{v:.3f}").rjust(width))
        lines.append("rho".ljust(18) + "".join(row))
    return "\n".join(lines) + "\n"


def write_fit_dir(fit_: FitResult, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "params.json"), "w") as fh:
        json.dump(params_payload(fit_), fh, indent=2)
    write_eblups(fit_, os.path.join(directory, "eblups.csv"))
    with open(os.path.join(directory, "summary.txt"), "w") as fh:
        fh.write(summary_text({fit_.model.mechanism.value: params_payload(fit_)}))


def write_report(report: SensitivityReport, directory: str) -> None:
    """Run directory: per-model params/eblups, cross-tab CSVs and a summary."""
    os.makedirs(directory, exist_ok=True)
    for m, f in report.fits.items():
        sub = os.path.join(directory, m)
        os.makedirs(sub, exist_ok=True)
        with open(os.path.join(sub, "params.json"), "w") as fh:
            json.dump(params_payload(f), fh, indent=2)
        write_eblups(f, os.path.join(sub, "eblups.csv"))
    qlab = [f"Q{k}" for k in range(1, 5)]
    for m, tab in report.quartile_tables.items():
        _write_table(os.path.join(directory, f"quartiles_{m}.csv"), tab, qlab, qlab, f"{report.baseline}\\{m}")
    for m, tab in report.ci_tables.items():
        _write_table(os.path.join(directory, f"ci_{m}.csv"), tab, CI_LABELS, CI_LABELS, f"{report.baseline}\\{m}")
    with open(os.path.join(directory, "effects.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        mechs = list(report.vectors)
        w.writerow(["teacher", *mechs])
        for j, tid in enumerate(report.teacher_ids):
            w.writerow([tid, *[repr(float(report.vectors[m][j])) for m in mechs]])
    for m, blocks in report.gamma_correlations.items():
        for name, R in blocks.items():
            np.savetxt(os.path.join(directory, f"corr_{m}_{name}.csv"), R, delimiter=",", fmt="%.6f")
    payload = {
        "comparison": report.selector.label,
        "baseline": report.baseline,
        "rho": report.rho,
        "spearman": report.spearman,
        "quartile_cutpoints": {m: quartile_cutpoints(v) for m, v in report.vectors.items() if len(v) >= 4},
        "models": {m: {"status": s.status, "message": s.message, "neg2loglik": s.neg2loglik,
                       "iterations": s.iterations} for m, s in report.summaries.items()},
    }
    with open(os.path.join(directory, "report.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    text = summary_text({m: params_payload(f) for m, f in report.fits.items()}, report.rho) if report.fits else ""
    text += f"\ncomparison effect: {report.selector.label} (baseline {report.baseline})\n"
    for m, s in report.summaries.items():
        text += f"{m}: {s.status}" + (f" ({s.message})" if s.message else "") + "\n"
    with open(os.path.join(directory, "summary.txt"), "w") as fh:
        fh.write(text)
