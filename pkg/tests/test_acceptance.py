"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are printed as the tests run (visible with ``-s``) and repeated in
the terminal summary.
"""

import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from crevam.data import build_cohort, parse_long_csv, write_long_csv
from crevam.design import ModelSpec, SeparationError, build_model
from crevam.estimation import FitOptions, fit
from crevam.likelihood import Objective, laplace_loglik, log_phi_cdf, objective_h
from crevam.oracle import QuadratureSpec, gaussian_marginal, quad_loglik, quad_posterior_means
from crevam.report import (ci_classification, ci_crosstab, quartile_boundaries, quartile_crosstab, quartiles,
                           run_sensitivity)
from crevam.simulate import SimDesign, example_params, generate

RESULTS: list[str] = []


def record(number, title, ok, detail):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    RESULTS.append(line)
    print(line)
    return ok


def random_params(rng, T, mech):
    return example_params(T, mech, teacher_var=rng.uniform(0.05, 0.3), persistence_var=rng.uniform(0.02, 0.1),
                          student_var=rng.uniform(0.3, 0.9), sigma2=rng.uniform(0.2, 0.6),
                          completion=rng.uniform(0.5, 0.8))


# -- 1 ----------------------------------------------------------------------------


def test_criterion_1_gaussian_exactness():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_val = worst_eta = 0.0
    count = 0
    while count < 20:
        T = int(rng.integers(1, 4))
        m = tuple(int(v) for v in rng.integers(1, 4, size=T))
        n = int(rng.integers(max(m) + 1, 16))
        p = random_params(rng, T, "MAR")
        c, _ = generate(SimDesign(n, T, m, p, "MAR", seed=int(rng.integers(1 << 30))))
        data = build_model(c, ModelSpec("MAR"))
        if data.layout.q > 50:
            continue
        neg2, state = laplace_loglik(p, data)
        ref, blup = gaussian_marginal(p, data)
        worst_val = max(worst_val, abs(neg2 - ref) / abs(ref))
        worst_eta = max(worst_eta, float(np.max(np.abs(state.eta - blup))))
        count += 1
    elapsed = time.perf_counter() - t0
    ok = worst_val < 1e-8 and worst_eta < 1e-8 and elapsed < 10
    assert record(1, "Gaussian exactness", ok,
                  f"max rel -2l gap {worst_val:.1e}, max EBLUP gap {worst_eta:.1e}, {elapsed:.1f} s")


# -- 2 ----------------------------------------------------------------------------


def moderate(data, p, eta):
    dz = data.designs
    score_lp = dz.X @ p.beta_score + dz.S @ eta
    att_lp = dz.W @ p.beta_attnd + dz.Z @ eta
    return max(np.max(np.abs(score_lp)), np.max(np.abs(att_lp), initial=0.0)) < 2


JOINT = [("MNAR-t", 2, (1, 1)), ("MNAR-tc", 1, (1,)), ("MNAR-s", 1, (1,)), ("MNAR-tc", 2, (1, 1)),
         ("MNAR-bc", 1, (1,))]


def joint_instances(count=10):
    out = []
    rng = np.random.default_rng(202)
    for trial in range(2000):
        mech, T, m = JOINT[trial % len(JOINT)]
        n = int(rng.integers(2, 5))
        years = (1,) if mech == "MNAR-s" else None
        p = example_params(T, mech, attendance_years=years, completion=float(rng.uniform(0.4, 0.7)))
        c, _ = generate(SimDesign(n, T, m, p, mech, seed=int(rng.integers(1 << 30)), attendance_years=years))
        try:
            data = build_model(c, ModelSpec(mech, attendance_years=years))
        except SeparationError:
            continue
        if data.dropped_years or not data.has_attendance or not 3 <= data.layout.q <= 6:
            continue
        _, state = laplace_loglik(p, data)
        if moderate(data, p, state.eta):
            out.append((data, p, state))
        if len(out) == count:
            return out
    raise AssertionError("could not draw enough joint instances")


def test_criterion_2_oracle_equivalence():
    t0 = time.perf_counter()
    worst_rel = worst_mode = 0.0
    mechs = set()
    for data, p, state in joint_instances():
        mechs.add(data.mechanism.value)
        spec = QuadratureSpec(nodes=12 if data.layout.q <= 5 else 10)
        ref = quad_loglik(p, data, spec)
        worst_rel = max(worst_rel, abs(state.neg2loglik - ref) / abs(ref))
        worst_mode = max(worst_mode, float(np.max(np.abs(state.eta - quad_posterior_means(p, data, spec)))))
    elapsed = time.perf_counter() - t0
    ok = worst_rel < 0.01 and worst_mode < 0.05 and elapsed < 120
    assert record(2, "oracle equivalence", ok,
                  f"10 instances over {sorted(mechs)}, max rel -2l gap {worst_rel:.2e}, "
                  f"max mode gap {worst_mode:.3f}, {elapsed:.1f} s")


# -- 3 ----------------------------------------------------------------------------


def test_criterion_3_derivatives():
    rng = np.random.default_rng(303)
    mechs = ["MAR", "MNAR-t", "MNAR-tc", "MNAR-s", "MNAR-b", "MNAR-bc"]
    t0 = time.perf_counter()
    worst_g = worst_h = 0.0
    done = k = 0
    while done < 50:
        mech = mechs[k % len(mechs)]
        k += 1
        T = int(rng.integers(2, 4))
        p = random_params(rng, T, mech)
        c, _ = generate(SimDesign(12, T, (2,) * T, p, mech, seed=int(rng.integers(1 << 30))))
        try:
            data = build_model(c, ModelSpec(mech))
        except SeparationError:
            continue
        if data.dropped_years:
            continue
        obj = Objective(p, data)
        q = data.layout.q
        eta = rng.normal(scale=0.6, size=q)
        _, g, H = objective_h(eta, p, data)
        H = H.toarray()
        e = 1e-5
        g_fd = np.empty(q)
        H_fd = np.empty((q, q))
        for j in range(q):
            d = np.zeros(q)
            d[j] = e
            g_fd[j] = (obj.value(eta + d) - obj.value(eta - d)) / (2 * e)
            H_fd[:, j] = (obj.value_grad(eta + d)[1] - obj.value_grad(eta - d)[1]) / (2 * e)
        worst_g = max(worst_g, np.linalg.norm(g_fd - g) / max(1.0, np.linalg.norm(g)))
        worst_h = max(worst_h, np.linalg.norm(H_fd - H) / max(1.0, np.linalg.norm(H)))
        done += 1
    elapsed = time.perf_counter() - t0
    ok = worst_g < 1e-6 and worst_h < 1e-6 and elapsed < 30
    assert record(3, "gradient/Hessian checks", ok,
                  f"50 points, max rel gradient gap {worst_g:.1e}, max rel Hessian gap {worst_h:.1e}, "
                  f"{elapsed:.1f} s")


# -- 4 ----------------------------------------------------------------------------

RECOVERY_SEEDS = range(5000, 5100)


def test_criterion_4_parameter_recovery():
    truth = example_params(3, "MNAR-t")
    t0 = time.perf_counter()
    est, rates, n_rows, unconverged = [], [], [], 0
    for seed in RECOVERY_SEEDS:
        c, _ = generate(SimDesign(500, 3, (20, 20, 20), truth, "MNAR-t", seed=seed))
        res = fit(c, ModelSpec("MNAR-t"), FitOptions(compute_se=False))
        unconverged += not res.converged
        est.append(res.params.natural_vector())
        rates.append(ndtr(res.params.beta_attnd))
        n_rows.append(np.bincount(res.model.designs.att.year, minlength=4)[2:])
        names = res.names
    elapsed = time.perf_counter() - t0
    est = np.array(est)
    R = len(est)
    mean = est.mean(axis=0)
    mcse = est.std(axis=0, ddof=1) / np.sqrt(R)
    z = (mean - truth.natural_vector()) / mcse
    off = [f"{names[k]} z={z[k]:+.1f}" for k in np.flatnonzero(np.abs(z) > 3)]
    # completion: mean of Phi(mu_r) per attendance year against 0.6 +- 3 binomial sd of one cohort
    rate_gap = np.abs(np.mean(rates, axis=0) - 0.6)
    rate_tol = 3 * np.sqrt(0.6 * 0.4 / np.mean(n_rows, axis=0))
    ok = not off and np.all(rate_gap <= rate_tol) and elapsed < 1800
    detail = (f"{R} replicates, {unconverged} unconverged, {len(off)} of {len(names)} means beyond 3 MC SE"
              + (f" [{', '.join(off)}]" if off else "")
              + f", Phi(mu_r) {np.round(np.mean(rates, axis=0), 4).tolist()} vs 0.6 +- "
              f"{np.round(rate_tol, 4).tolist()}, {elapsed / 60:.1f} min")
    assert record(4, "parameter recovery", ok, detail)


# -- 5 ----------------------------------------------------------------------------

NULL_SEEDS = range(6000, 6020)


def test_criterion_5_mar_null_sensitivity():
    p = example_params(3, "MAR")
    t0 = time.perf_counter()
    rhos = []
    for seed in NULL_SEEDS:
        c, _ = generate(SimDesign(500, 3, (20, 20, 20), p, "MAR", seed=seed))
        rep = run_sensitivity(c, ("MAR", "MNAR-t"), options=FitOptions(compute_se=False))
        rhos.append(rep.rho.get("MNAR-t"))
    elapsed = time.perf_counter() - t0
    valid = [r for r in rhos if r is not None]
    mean_rho = float(np.mean(valid)) if valid else float("nan")
    ok = len(valid) == len(rhos) and mean_rho >= 0.99
    assert record(5, "MAR-null sensitivity", ok,
                  f"mean rho {mean_rho:.4f} over {len(valid)} replicates, min {min(valid):.4f}, "
                  f"{elapsed / 60:.1f} min")


# -- 6 ----------------------------------------------------------------------------


def complete_first_year_cohort():
    p = example_params(3, "MNAR-t")
    c, _ = generate(SimDesign(200, 3, (8, 8, 8), p, "MNAR-t", seed=77))
    assert not np.isnan(c.score[c.year == 1]).any()
    return c


def test_criterion_6_separation_guard():
    c = complete_first_year_cohort()
    try:
        fit(c, ModelSpec("MNAR-t", attendance_years=(1, 2, 3)), FitOptions(compute_se=False))
        refused, msg = False, "fit accepted year 1"
    except SeparationError as exc:
        refused, msg = "year=1" in str(exc), str(exc)
    data = build_model(c, ModelSpec("MNAR-t"))
    default_ok = data.attendance_years == (2, 3) and data.designs.W.shape[1] == 2
    ok = refused and default_ok
    assert record(6, "separation guard", ok,
                  f"explicit year 1 refused: {refused} ({msg.splitlines()[0][:80]}); "
                  f"default attendance years {data.attendance_years}")


# -- 7 ----------------------------------------------------------------------------

relaxed = settings(max_examples=8, deadline=None, suppress_health_check=list(HealthCheck))


@given(st.floats(-40, 40))
def prop_probit_normalization(v):
    assert np.exp(log_phi_cdf(v)) + np.exp(log_phi_cdf(-v)) == pytest.approx(1.0, abs=1e-14)


# equivariance holds iterate by iterate, so a short plain EM path tests it
# exactly without waiting for convergence
PATH = FitOptions(compute_se=False, accelerate=False, max_iter=40)


@relaxed
@given(st.integers(0, 1000), st.floats(-3, 3), st.integers(1, 2))
def prop_location_equivariance(seed, shift, g):
    p = example_params(2, "MNAR-t", teacher_var=0.15, persistence_var=0.08)
    c, _ = generate(SimDesign(60, 2, (3, 3), p, "MNAR-t", seed=seed))
    score = c.score.copy()
    score[c.year == g] += shift
    a = fit(c, ModelSpec("MNAR-t"), PATH)
    b = fit(c.with_scores(score), ModelSpec("MNAR-t"), PATH)
    expect = a.params.beta_score.copy()
    expect[g - 1] += shift
    np.testing.assert_allclose(b.params.beta_score, expect, atol=1e-6)
    np.testing.assert_allclose(b.params.sigma2, a.params.sigma2, atol=1e-6)
    for (_, ga), (_, gb) in zip(a.params.blocks(), b.params.blocks()):
        np.testing.assert_allclose(gb, ga, atol=1e-6)
    np.testing.assert_allclose(b.params.beta_attnd, a.params.beta_attnd, atol=1e-6)
    np.testing.assert_allclose(b.eta, a.eta, atol=1e-6)


def records_of(c):
    cov = list(c.covariates)
    return [(c.student_ids[c.student[k]], int(c.year[k]),
             c.rosters[c.year[k] - 1][c.teacher[k]] if c.teacher[k] >= 0 else None,
             None if np.isnan(c.score[k]) else float(c.score[k]),
             {name: c.covariates[name][k] for name in cov}) for k in range(len(c.year))], cov


@relaxed
@given(st.integers(0, 1000), st.randoms(use_true_random=False))
def prop_label_invariance(seed, rnd):
    p = example_params(2, "MNAR-t")
    c, _ = generate(SimDesign(40, 2, (4, 4), p, "MNAR-t", seed=seed))
    recs, cov = records_of(c)
    rnd.shuffle(recs)
    rosters = [list(r) for r in c.rosters]
    for r in rosters:
        rnd.shuffle(r)
    c2 = build_cohort(recs, T=2, covariate_names=cov, rosters=rosters)
    a, sa = laplace_loglik(p, build_model(c, ModelSpec("MNAR-t")))
    d2 = build_model(c2, ModelSpec("MNAR-t"))
    b, sb = laplace_loglik(p, d2)
    assert b == pytest.approx(a, abs=1e-8)
    lay = d2.layout
    # map every teacher coordinate of the permuted model back to the original
    for g in (1, 2):
        for j2, tid in enumerate(c2.rosters[g - 1]):
            j = c.rosters[g - 1].index(tid)
            for t in range(g, 3):
                assert sb.eta[lay.theta_coord(g, j2, t)] == pytest.approx(sa.eta[lay.theta_coord(g, j, t)], abs=1e-7)
    for i2, sid in enumerate(c2.student_ids):
        i = c.student_ids.index(sid)
        assert sb.eta[lay.student_coord(i2)] == pytest.approx(sa.eta[lay.student_coord(i)], abs=1e-7)


grid = st.integers(-3000, 3000).map(lambda k: k / 1000)


@settings(max_examples=60, deadline=None)
@given(st.integers(4, 60).flatmap(lambda n: st.tuples(*(st.lists(grid, min_size=n, max_size=n) for _ in range(4)))))
def prop_crosstab_margins(vs):
    a, b, wa, wb = (np.asarray(v) for v in vs)
    N = len(a)
    tab = quartile_crosstab(a, b)
    k1, k2, k3 = quartile_boundaries(N)
    sizes = [k1, k2 - k1, k3 - k2, N - k3]
    assert tab.sum() == N
    assert tab.sum(axis=1).tolist() == sizes == np.bincount(quartiles(a), minlength=4).tolist()
    assert tab.sum(axis=0).tolist() == sizes
    ct = ci_crosstab(ci_classification(a - abs(wa), a + abs(wa)), ci_classification(b - abs(wb), b + abs(wb)))
    assert ct.sum() == N


@relaxed
@given(st.integers(0, 1000), st.sampled_from(["MNAR-t", "MNAR-b", "MNAR-tc"]))
def prop_gamma_pd_across_em(seed, mech):
    p = example_params(2, mech)
    c, _ = generate(SimDesign(60, 2, (3, 3), p, mech, seed=seed))
    try:
        data = build_model(c, ModelSpec(mech))
    except SeparationError:
        return
    smallest = []

    def watch(it, params, neg2):
        smallest.append(min(np.linalg.eigvalsh(g).min() for _, g in params.blocks()))

    from crevam.estimation import fit_model
    fit_model(data, FitOptions(compute_se=False, max_iter=60, callback=watch))
    assert smallest and min(smallest) > 0


@relaxed
@given(st.integers(0, 10_000), st.sampled_from(["MAR", "MNAR-t", "MNAR-b", "MNAR-s"]))
def prop_csv_round_trip(tmp_path_factory, seed, mech):
    p = example_params(3, mech)
    c, _ = generate(SimDesign(25, 3, (3, 3, 3), p, mech, seed=seed))
    path = tmp_path_factory.mktemp("rt") / "c.csv"
    write_long_csv(c, str(path))
    with open(path, "rb") as fh:
        assert parse_long_csv(fh, T=3) == c


def test_criterion_7_invariants(tmp_path_factory):
    props = {
        "probit normalization": prop_probit_normalization,
        "location equivariance": prop_location_equivariance,
        "label invariance": prop_label_invariance,
        "cross-tab margins": prop_crosstab_margins,
        "Gamma PD across EM": prop_gamma_pd_across_em,
        "CSV round trip": lambda: prop_csv_round_trip(tmp_path_factory),
    }
    t0 = time.perf_counter()
    failed = []
    for name, prop in props.items():
        try:
            prop()
        except Exception as exc:  # noqa: BLE001 - report every property, then fail
            failed.append(f"{name}: {type(exc).__name__}")
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 300
    assert record(7, "invariant suite", ok,
                  f"{len(props) - len(failed)}/{len(props)} properties hold"
                  + (f" [{'; '.join(failed)}]" if failed else "") + f", {elapsed:.1f} s")
