import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from factorcop import (ConvergenceError, DomainError, LongitudinalDataset, MarginalParams,
                       fit_marginal, marginal_loglik, pit)
from factorcop import marginals as mg
from factorcop.simulator import CopulaTruth, generate_dataset, preset

from conftest import make_dataset

# independent mpmath evaluations at 40 digits; the density uses rate kappa / mu,
# so the log-density carries the -kappa * log(mu) = -3 term
GAMMA_LOGPDF_K3_MU_E_Y1 = -1.50094863806994320
GAMMA_P_3_3 = 0.57680991887315648


def one_obs(kind, y, x=1.0, K=None):
    return LongitudinalDataset.from_arrays(["a"], [0.0], [y], np.array([[x]]), kind,
                                           ["(Intercept)"] if kind != "ordinal" else ["x"], K)


def test_normal_at_mean():
    d = one_obs("normal", 2.0)
    assert marginal_loglik(d, MarginalParams([2.0], 1.0)) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-14)


def test_binary_half():
    d = one_obs("binary", 1)
    assert marginal_loglik(d, MarginalParams([0.0])) == pytest.approx(np.log(0.5), abs=1e-14)


def test_gamma_closed_form():
    d = one_obs("gamma", 1.0)
    assert marginal_loglik(d, MarginalParams([1.0], 3.0)) == pytest.approx(GAMMA_LOGPDF_K3_MU_E_Y1, abs=1e-12)


def test_nonpositive_dispersion():
    d = one_obs("normal", 0.0)
    with pytest.raises(DomainError):
        marginal_loglik(d, MarginalParams([0.0], 0.0))
    with pytest.raises(DomainError):
        marginal_loglik(one_obs("gamma", 1.0), MarginalParams([0.0], -1.0))


def test_thresholds_must_increase():
    d = make_dataset([3], "ordinal", y=[1, 2, 3], K=3)
    with pytest.raises(DomainError):
        marginal_loglik(d, MarginalParams([0.0], thresholds=[1.0, 0.5]))


def test_normal_closed_form_mle():
    d = make_dataset([3], "normal", y=[1.0, 2.0, 3.0])
    f = fit_marginal(d)
    assert f.params.beta[0] == pytest.approx(2.0, abs=1e-6)
    assert f.params.dispersion == pytest.approx(2 / 3, abs=1e-6)
    assert f.converged


def test_ordinal_all_first_category():
    d = make_dataset([4, 3], "ordinal", y=[1] * 7, K=3)
    with pytest.raises(ConvergenceError):
        fit_marginal(d)


def test_gamma_recovery_m500():
    d = generate_dataset(preset("gamma-1f-gauss", m=500, seed=1))
    f = fit_marginal(d)
    truth = np.array([1.0, -0.5, 0.2, 0.2, 3.0])
    est = mg.natural_vector(d, f.params)
    # SEs under independence understate the sampling spread; 3 of them is still a tight check
    assert np.all(np.abs(est - truth) < 3 * f.se * 2)


def test_optimum_is_stationary_and_concave():
    d = generate_dataset(preset("ordinal-1f-gauss", m=150, seed=2))
    f = fit_marginal(d)
    _, g = mg.loglik_free(d, f.theta_free)
    assert np.max(np.abs(g)) / d.n_obs < 1e-4
    H = mg.numerical_jacobian(lambda t: mg.loglik_free(d, t)[1], f.theta_free)
    assert np.all(np.linalg.eigvalsh(0.5 * (H + H.T)) < 0)


def test_pit_examples():
    d = one_obs("normal", 1.3)
    s = pit(d, MarginalParams([1.3], 2.0))
    assert s.u[0] == pytest.approx(0.5) and s.u_minus[0] == s.u[0]
    b = make_dataset([2], "binary", y=[0, 1])
    b = LongitudinalDataset.from_arrays(["a", "a"], [0, 1], [0, 1], np.ones((2, 1)), "binary", ["(Intercept)"])
    s = pit(b, MarginalParams([0.0]))
    assert (s.u_minus[0], s.u[0]) == (0.0, pytest.approx(0.5))
    assert (s.u_minus[1], s.u[1]) == (pytest.approx(0.5), 1.0)
    g = one_obs("gamma", 2.0)
    s = pit(g, MarginalParams([np.log(2.0)], 3.0))
    assert s.u[0] == pytest.approx(GAMMA_P_3_3, abs=1e-12)


def test_to_dict_fields():
    f = fit_marginal(make_dataset([3, 4, 2], "gamma", seed=4))
    out = f.to_dict()
    assert {"family", "beta", "dispersion", "se", "loglik", "converged"} <= set(out)


def test_pit_uniform_under_truth():
    passed = 0
    reps = 40
    for r in range(reps):
        design = preset("gamma-1f-gauss", m=150, seed=100 + r,
                        generator=CopulaTruth(1, "gaussian", 0.0))
        d = generate_dataset(design)
        u = pit(d, design.marginal_params).u
        passed += stats.kstest(u, "uniform").pvalue > 0.01
    assert passed / reps >= 0.95


@st.composite
def discrete_case(draw):
    K = draw(st.integers(2, 5))
    gaps = draw(st.lists(st.floats(0.1, 2.0), min_size=K - 2, max_size=K - 2))
    g0 = draw(st.floats(-2, 2))
    thr = np.concatenate([[g0], g0 + np.cumsum(gaps)]) if K > 2 else np.array([g0])
    beta = draw(st.floats(-2, 2))
    return K, thr, beta


@given(discrete_case(), st.floats(-3, 3))
def test_ordinal_pit_monotone(case, x):
    K, thr, beta = case
    ys = np.arange(1, K + 1)
    d = LongitudinalDataset.from_arrays(["a"] * K, np.arange(K), ys, np.full((K, 1), x),
                                        "ordinal", ["x"], K)
    s = pit(d, MarginalParams([beta], thresholds=thr))
    assert np.all(s.u_minus <= s.u)
    assert np.all(np.diff(s.u) >= 0)
    assert np.allclose(s.u[:-1], s.u_minus[1:])


@given(st.lists(st.floats(0.01, 50), min_size=2, max_size=10), st.floats(0.2, 10), st.floats(-2, 2))
def test_gamma_pit_monotone(ys, kappa, b0):
    ys = sorted(ys)
    n = len(ys)
    d = LongitudinalDataset.from_arrays(["a"] * n, np.arange(n), ys, np.ones((n, 1)), "gamma",
                                        ["(Intercept)"])
    u = pit(d, MarginalParams([b0], kappa)).u
    assert np.all(np.diff(u) >= 0)


@pytest.mark.parametrize("kind,K", [("gamma", None), ("normal", None), ("binary", None), ("ordinal", 4)])
def test_analytic_gradient(kind, K):
    d = make_dataset([3, 5, 2, 4], kind, K=K, seed=7, p=3)
    theta = mg.to_free(d, mg.initial_params(d)) + 0.1
    _, g = mg.loglik_free(d, theta)
    num = mg.numerical_jacobian(lambda t: mg.loglik_free(d, t)[0], theta, step=1e-6)[0]
    assert np.allclose(g, num, rtol=1e-5, atol=1e-6)
