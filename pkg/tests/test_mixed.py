import numpy as np
import pytest
from scipy import stats

from factorcop import (ConvergenceError, DomainError, FactorCopulaSpec, LongitudinalDataset,
                       MarginalParams, MixedParams, MixedSpec, fit_mixed, fit_two_stage,
                       marginal_loglik, mixed_loglik, simulate_mixed)
from factorcop import mixed_baseline as mb
from factorcop.simulator import CopulaTruth, generate_dataset, preset

from conftest import make_dataset

NORMAL_BETA = (1.0, -0.5, 0.2, 0.2)


def mvn_loglik(data, beta, phi, v0):
    total = 0.0
    for i, s in enumerate(data.subjects):
        sl = slice(data.starts[i], data.starts[i] + s.n)
        mean = data.X[sl] @ beta
        cov = phi * np.eye(s.n) + v0 * np.ones((s.n, s.n))
        total += stats.multivariate_normal(mean, cov).logpdf(data.y[sl])
    return total


def test_spec_validation():
    with pytest.raises(DomainError):
        MixedSpec(3)
    with pytest.raises(DomainError):
        MixedSpec(1, n_quad=1)
    assert MixedSpec(1).name == "RI" and MixedSpec(2).name == "RIS"


def test_vanishing_variance():
    data = generate_dataset(preset("gamma-ri", m=40, seed=1))
    mp = MarginalParams(np.array([1.0, -0.5, 0.2, 0.2]), 3.0)
    # the gap is first order in V and grows with t^2 through the slope column,
    # so the simulation slope scaling is used
    for spec in (MixedSpec(1, slope_scale=0.1), MixedSpec(2, slope_scale=0.1)):
        v = np.full(spec.n_random, 1e-10)
        assert mixed_loglik(data, spec, MixedParams(mp, v)) == pytest.approx(
            marginal_loglik(data, mp), abs=1e-4)


def test_normal_ri_closed_form_small():
    data = make_dataset([3, 1, 2, 4], "normal", seed=2)
    beta, phi, v0 = np.array([0.1]), 0.8, 0.6
    val = mixed_loglik(data, MixedSpec(1, n_quad=40), MixedParams(MarginalParams(beta, phi), [v0]))
    assert val == pytest.approx(mvn_loglik(data, beta, phi, v0), abs=1e-6)


@pytest.mark.xfail(strict=True, reason="fixed 15-node Gauss-Hermite is off by 5.8e-4 here; "
                   "30 nodes give 3e-7")
def test_normal_ri_closed_form_small_15():
    data = make_dataset([3, 1, 2, 4], "normal", seed=2)
    beta, phi, v0 = np.array([0.1]), 0.8, 0.6
    val = mixed_loglik(data, MixedSpec(1), MixedParams(MarginalParams(beta, phi), [v0]))
    assert val == pytest.approx(mvn_loglik(data, beta, phi, v0), abs=1e-6)


def test_normal_ri_closed_form_simulated():
    # at 15 nodes the fixed rule drifts by ~0.6 over 200 subjects
    data = simulate_mixed("normal", NORMAL_BETA, [1.0], dispersion=1.0, m=200, seed=3)
    beta, phi, v0 = np.array(NORMAL_BETA), 1.0, 1.0
    val = mixed_loglik(data, MixedSpec(1, n_quad=150), MixedParams(MarginalParams(beta, phi), [v0]))
    assert val == pytest.approx(mvn_loglik(data, beta, phi, v0), abs=1e-6)


def test_binary_symmetry():
    data = LongitudinalDataset.from_arrays(["a"], [0.0], [1], np.ones((1, 1)), "binary", ["(Intercept)"])
    val = mixed_loglik(data, MixedSpec(1), MixedParams(MarginalParams([0.0]), [1.0]))
    assert val == pytest.approx(np.log(0.5), abs=1e-14)


def test_variance_validation():
    data = make_dataset([2, 2], "normal")
    with pytest.raises(DomainError):
        mixed_loglik(data, MixedSpec(1), MixedParams(MarginalParams([0.0], 1.0), [0.0]))
    with pytest.raises(DomainError):
        mixed_loglik(data, MixedSpec(2), MixedParams(MarginalParams([0.0], 1.0), [1.0]))


@pytest.mark.parametrize("kind,K", [("gamma", None), ("normal", None), ("binary", None), ("ordinal", 3)])
@pytest.mark.parametrize("n_random", [1, 2])
def test_gradient(kind, K, n_random):
    data = make_dataset([3, 5, 2, 4, 1], kind, K=K, seed=7, p=2)
    spec = MixedSpec(n_random, slope_scale=0.5)
    from factorcop import marginals as mg
    theta = np.concatenate([mg.to_free(data, mg.initial_params(data)) + 0.05,
                            np.log(np.full(n_random, 0.7))])
    _, g, _ = mb.loglik_free(data, spec, theta)
    num = mg.numerical_jacobian(lambda t: mb.loglik_free(data, spec, t)[0].sum(), theta, step=1e-6)[0]
    assert np.allclose(g, num, rtol=1e-5, atol=1e-6)


def test_binary_ri_recovery():
    data = generate_dataset(preset("binary-ri", m=200, seed=11))
    fit = fit_mixed(data, MixedSpec(1, slope_scale=0.1))
    v = fit.estimates()["V[b0]"]
    assert abs(v - 1.0) < 3 * fit.se[-1]
    assert fit.dim == 5 and fit.aic == pytest.approx(-2 * fit.loglik + 10)
    out = fit.to_dict()
    assert out["spec"] == "RI" and out["quad"] == {"mode": "hermite", "n": 15}


def test_all_zero_binary_diverges():
    data = make_dataset([3, 3], "binary", y=[0] * 6)
    with pytest.raises(ConvergenceError):
        fit_mixed(data, MixedSpec(1))


def test_zero_variance_matches_glm_simulation():
    a = simulate_mixed("normal", NORMAL_BETA, [0.0], dispersion=1.0, m=30, seed=5)
    b = generate_dataset(preset("normal-1f-gauss", m=30, seed=5, generator=CopulaTruth(1, "gaussian", 0.0)))
    assert np.array_equal(a.X, b.X)
    # the copula path maps w through Phi(Phi^-1(w)), exact up to rounding
    assert np.allclose(a.y, b.y, rtol=0, atol=1e-12)


def test_intraclass_correlation():
    data = simulate_mixed("normal", NORMAL_BETA, [1.0], dispersion=1.0, m=2000, seed=6)
    r = data.y - data.X @ np.array(NORMAL_BETA)
    pairs = np.array([(r[s], r[s + 1]) for s, n in zip(data.starts, data.sizes) if n >= 2])
    assert np.corrcoef(pairs.T)[0, 1] == pytest.approx(0.5, abs=0.03)


def test_ris_variance_growth():
    data = simulate_mixed("normal", NORMAL_BETA, [1.0, 1.0], dispersion=1.0, m=6000, seed=7)
    r = data.y - data.X @ np.array(NORMAL_BETA)
    for t in (1.0, 5.0, 8.0):
        expect = 1.0 + 0.01 * t ** 2 + 1.0
        assert np.var(r[data.time == t]) == pytest.approx(expect, rel=0.07)


@pytest.mark.xfail(strict=True, reason="two-stage estimates are not the joint maximum and 15 "
                   "nodes add error: gaps of 2.6 and 2.0 on seeds 0 and 10")
def test_ri_matches_gaussian_factor_normal():
    for seed in range(12):
        data = generate_dataset(preset("normal-ri", m=200, seed=seed))
        ri = fit_mixed(data, MixedSpec(1, slope_scale=0.1))
        fc = fit_two_stage(data, FactorCopulaSpec(1, "gaussian"), godambe=False)
        assert abs(ri.loglik - fc.factor.loglik) < 0.5


def test_ri_factor_gap_decomposition():
    from scipy import optimize
    from factorcop import make_quadrature
    data = generate_dataset(preset("normal-ri", m=200, seed=0))
    ri = fit_mixed(data, MixedSpec(1, slope_scale=0.1, n_quad=80))
    fc = fit_two_stage(data, FactorCopulaSpec(1, "gaussian"), make_quadrature(60), godambe=False)

    def nll(t):
        return -mvn_loglik(data, t[:4], np.exp(t[4]), np.exp(t[5]))

    start = np.concatenate([ri.params.marginal.beta, np.log([ri.params.marginal.dispersion,
                                                              ri.params.variances[0]])])
    mle = -optimize.minimize(nll, start, method="BFGS").fun
    # with enough nodes RI is the exact normal MLE
    assert ri.loglik == pytest.approx(mle, abs=1e-3)
    # and the factor fit is the exact normal density at the two-stage estimates
    mp, rho = fc.marginal.params, fc.factor.rho1
    at_ifm = mvn_loglik(data, mp.beta, mp.dispersion * (1 - rho ** 2), mp.dispersion * rho ** 2)
    assert fc.factor.loglik == pytest.approx(at_ifm, abs=1e-2)
    assert 0 <= mle - at_ifm < 2.0


def test_loglik_lower_away_from_mle():
    data = generate_dataset(preset("normal-ri", m=100, seed=8))
    fit = fit_mixed(data, MixedSpec(1, slope_scale=0.1))
    far = MixedParams(fit.params.marginal, fit.params.variances * 10)
    assert mixed_loglik(data, MixedSpec(1), far) < fit.loglik - 1
