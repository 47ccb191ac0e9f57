"""Command-line entry point.

Exit codes: 0 when every requested fit converged, 2 when a fit stopped at
its iteration cap, 1 on input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .data import DataError, parse_long_csv, standardize_scores, write_long_csv
from .design import AttendanceMechanism, DesignError, build_model
from .estimation import EstimationError, fit_model
from .likelihood import ModeSearchError, laplace_loglik
from .oracle import OracleError, QuadratureSpec, gaussian_marginal, qmc_loglik, quad_loglik
from .params import ParameterError, ParameterSet
from .report import (EffectSelector, ReportError, params_payload, run_sensitivity, summary_text, write_fit_dir,
                     write_report)
from .simulate import SimDesign, example_params, generate, mnar_stress

INPUT_ERRORS = (ConfigError, DataError, DesignError, EstimationError, OracleError, ParameterError, ReportError,
                OSError, json.JSONDecodeError)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    opts = {}
    if getattr(args, "mechanism", None):
        cfg.mechanism = AttendanceMechanism.parse(args.mechanism)
    if getattr(args, "T", None):
        cfg.T = args.T
    if getattr(args, "max_iter", None):
        opts["max_iter"] = args.max_iter
    if getattr(args, "no_se", False):
        opts["compute_se"] = False
    if opts:
        cfg.options = replace(cfg.options, **opts)
    return cfg


def _cohort(path: str, cfg: RunConfig):
    with open(path, "rb") as fh:
        cohort = parse_long_csv(fh, cfg.schema, cfg.T, cfg.require_first_year, cfg.missing_teacher)
    return standardize_scores(cohort) if cfg.standardize else cohort


def cmd_fit(args) -> int:
    cfg = _config(args)
    cohort = _cohort(args.data, cfg)
    data = build_model(cohort, cfg.model_spec())
    result = fit_model(data, cfg.options)
    write_fit_dir(result, args.out)
    print(summary_text({data.mechanism.value: params_payload(result)}), end="")
    return 0 if result.converged else 2


def cmd_simulate(args) -> int:
    m = tuple(int(v) for v in args.m.split(","))
    if len(m) == 1:
        m = m * args.T
    if args.params:
        with open(args.params) as fh:
            payload = json.load(fh)
        params = ParameterSet.from_dict(payload.get("params", payload))
    else:
        params = example_params(args.T, args.mechanism, completion=args.completion)
    design = SimDesign(args.n, args.T, m, params, args.mechanism, args.seed)
    if args.stress:
        cohort = mnar_stress(design, args.stress)
    else:
        cohort, _ = generate(design)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        write_long_csv(cohort, fh)
    with open(os.path.splitext(args.out)[0] + ".truth.json", "w") as fh:
        json.dump({"mechanism": design.mechanism.value, "seed": args.seed, "m": list(m),
                   "params": params.to_dict()}, fh, indent=2)
    print(f"wrote {cohort.n} students, {cohort.n_rows} rows, {int(np.sum(cohort.r == 0))} missing scores")
    return 0


def cmd_sensitivity(args) -> int:
    cfg = _config(args)
    cohort = _cohort(args.data, cfg)
    mechs = tuple(args.mechanisms.split(",")) if args.mechanisms else cfg.mechanisms
    sel = EffectSelector(args.teacher_year, args.effect_year, args.attendance_effect)
    report = run_sensitivity(cohort, mechs, cfg.score_terms, cfg.attendance_terms, cfg.options, sel,
                             workers=cfg.workers)
    write_report(report, args.out)
    print(open(os.path.join(args.out, "summary.txt")).read(), end="")
    if not report.fits:
        return 1
    return 0 if report.complete else 2


def cmd_oracle(args) -> int:
    cfg = _config(args)
    cohort = _cohort(args.data, cfg)
    data = build_model(cohort, cfg.model_spec())
    if args.params:
        with open(args.params) as fh:
            payload = json.load(fh)
        params = ParameterSet.from_dict(payload.get("params", payload))
    else:
        params = fit_model(data, replace(cfg.options, compute_se=False)).params
    neg2, state = laplace_loglik(params, data)
    print(f"q = {data.layout.q}")
    print(f"laplace      {neg2:.10f}")
    if not data.has_attendance:
        print(f"closed form  {gaussian_marginal(params, data)[0]:.10f}")
    try:
        print(f"quadrature   {quad_loglik(params, data, QuadratureSpec(nodes=args.nodes)):.10f}")
    except OracleError as exc:
        print(f"quadrature   skipped ({exc})")
    try:
        res = qmc_loglik(params, data, args.qmc_points, args.seed)
        print(f"qmc          {res.neg2loglik:.10f} +/- {res.stderr:.2e} ({res.n_points} points)")
    except OracleError as exc:
        print(f"qmc          skipped ({exc})")
    return 0


def cmd_report(args) -> int:
    payloads = {}
    for d in args.runs:
        with open(os.path.join(d, "params.json")) as fh:
            pl = json.load(fh)
        payloads[pl.get("mechanism", os.path.basename(d.rstrip("/")))] = pl
    print(summary_text(payloads), end="")
    return 0 if all(pl["converged"] for pl in payloads.values()) else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crevam", description="Value-added models with nonignorable attendance.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value run configuration")
        sp.add_argument("data", help="long-format CSV, one row per student-year")
        sp.add_argument("--T", type=int, help="number of years")
        sp.add_argument("--max-iter", type=int)
        sp.add_argument("--no-se", action="store_true", help="skip standard errors")

    sp = sub.add_parser("fit", help="fit one model")
    common(sp)
    sp.add_argument("--mechanism")
    sp.add_argument("--out", default="run")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("simulate", help="write a synthetic cohort")
    sp.add_argument("--n", type=int, default=500)
    sp.add_argument("--T", type=int, default=3)
    sp.add_argument("--m", default="20", help="teachers per year (one value or a comma list)")
    sp.add_argument("--mechanism", default="MNAR-t")
    sp.add_argument("--completion", type=float, default=0.6)
    sp.add_argument("--params", help="ParameterSet JSON (defaults to a built-in example)")
    sp.add_argument("--stress", type=float, default=0.0, help="extra MNAR deletion severity")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="cohort.csv")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sensitivity", help="compare attendance mechanisms")
    common(sp)
    sp.add_argument("--mechanisms", help="comma list, e.g. MAR,MNAR-t")
    sp.add_argument("--teacher-year", type=int, default=1)
    sp.add_argument("--effect-year", type=int)
    sp.add_argument("--attendance-effect", action="store_true")
    sp.add_argument("--out", default="sensitivity")
    sp.set_defaults(func=cmd_sensitivity)

    sp = sub.add_parser("oracle", help="compare the Laplace value with brute-force integrals")
    common(sp)
    sp.add_argument("--mechanism")
    sp.add_argument("--params", help="params.json from a fit (fits first when omitted)")
    sp.add_argument("--nodes", type=int, default=10)
    sp.add_argument("--qmc-points", type=int, default=2 ** 16)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("report", help="side-by-side summary of fitted run directories")
    sp.add_argument("runs", nargs="+")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ModeSearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
