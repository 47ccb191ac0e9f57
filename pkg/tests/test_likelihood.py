import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from crevam.likelihood import (Objective, find_mode, inverse_mills, laplace_loglik, log_f_attend, log_f_score,
                               log_phi_cdf, log_prior, objective_h, probit_curvature)
from crevam.oracle import gaussian_marginal

from conftest import model


def test_log_phi_tails():
    assert log_phi_cdf(-40.0) == pytest.approx(norm.logcdf(-40.0), rel=1e-12)
    assert np.isfinite(log_phi_cdf(-1e3))
    assert -1e-300 <= log_phi_cdf(40.0) <= 0.0


@given(st.floats(-30, 30))
def test_probit_normalization(v):
    # P(r=1) + P(r=0) = 1 for every linear predictor
    assert np.exp(log_phi_cdf(v)) + np.exp(log_phi_cdf(-v)) == pytest.approx(1.0, abs=1e-14)


def test_inverse_mills_stable():
    u = np.array([-50.0, -10.0, 0.0, 5.0])
    lam = inverse_mills(u)
    np.testing.assert_allclose(lam[1:], norm.pdf(u[1:]) / norm.cdf(u[1:]), rtol=1e-10)
    assert lam[0] == pytest.approx(50.0, rel=1e-3)
    c = probit_curvature(np.linspace(-30, 30, 61))
    assert np.all((c > 0) & (c < 1))


@pytest.mark.parametrize("mech", ["MAR", "MNAR-t", "MNAR-s", "MNAR-b", "MNAR-tc", "MNAR-bc"])
def test_h_is_sum_of_components(mech):
    data, p = model(mech, n=20, T=3, m=3, seed=1)
    eta = np.random.default_rng(0).normal(scale=0.3, size=data.layout.q)
    h, _, _ = objective_h(eta, p, data)
    dz = data.designs
    parts = log_f_score(dz.y, eta, p, dz) + log_prior(eta, p, data.layout)
    if data.has_attendance:
        parts += log_f_attend(dz.r, eta, p, dz)
    assert h == pytest.approx(parts, rel=1e-12)


@pytest.mark.parametrize("mech", ["MNAR-t", "MNAR-b", "MNAR-tc"])
def test_derivatives_central_differences(mech):
    data, p = model(mech, n=12, T=2, m=2, seed=3)
    rng = np.random.default_rng(7)
    obj = Objective(p, data)
    for _ in range(3):
        eta = rng.normal(scale=0.5, size=data.layout.q)
        _, g, H = objective_h(eta, p, data)
        H = H.toarray()
        e = 1e-5
        for k in range(data.layout.q):
            d = np.zeros(data.layout.q)
            d[k] = e
            gk = (obj.value(eta + d) - obj.value(eta - d)) / (2 * e)
            assert gk == pytest.approx(g[k], rel=1e-6, abs=1e-7)
            Hk = (obj.value_grad(eta + d)[1] - obj.value_grad(eta - d)[1]) / (2 * e)
            np.testing.assert_allclose(Hk, H[:, k], rtol=1e-6, atol=1e-6)


def test_eta_shape_checked():
    data, p = model("MAR", n=10, T=2, m=2)
    with pytest.raises(ValueError):
        log_prior(np.zeros(3), p, data.layout)


def test_gaussian_case_exact():
    data, p = model("MAR", n=25, T=3, m=3, seed=5)
    neg2, state = laplace_loglik(p, data)
    ref, blup = gaussian_marginal(p, data)
    assert neg2 == pytest.approx(ref, rel=1e-10)
    np.testing.assert_allclose(state.eta, blup, atol=1e-9)


def test_prior_dominance_limit():
    data, p = model("MNAR-t", n=20, T=2, m=2, seed=2)
    tiny = p.copy()
    tiny.gamma_stu = tiny.gamma_stu * 1e-8
    tiny.gammas = [g * 1e-8 for g in tiny.gammas]
    state = find_mode(tiny, data)
    assert np.max(np.abs(state.eta)) < 1e-6


def test_warm_start_reaches_same_mode():
    data, p = model("MNAR-b", n=40, T=3, m=3, seed=8)
    s0 = find_mode(p, data)
    s1 = find_mode(p, data, eta0=s0.eta + 0.3)
    np.testing.assert_allclose(s0.eta, s1.eta, atol=1e-7)
    assert find_mode(p, data, eta0=s0.eta).iterations == 0


def test_batch_values_match_scalar():
    data, p = model("MNAR-s", n=10, T=2, m=2, seed=1)
    obj = Objective(p, data)
    E = np.random.default_rng(2).normal(size=(5, data.layout.q))
    np.testing.assert_allclose(obj.batch_values(E), [obj.value(e) for e in E], rtol=1e-12)
