import numpy as np
import pytest

from factorcop import FactorCopulaSpec, GodambeError, fit_two_stage, godambe_se
from factorcop import marginals as mg
from factorcop.factor_model import sandwich
from factorcop.simulator import generate_dataset, preset


def test_scalar_sandwich():
    rng = np.random.default_rng(0)
    x = rng.normal(2.0, 1.5, size=400)
    # psi_i(t) = x_i - t: D = -1, M = mean (x - t)^2
    psi = lambda t: (x - t[0])[:, None]
    t = np.array([x.mean()])
    D, M, J, cov = sandwich(psi, t)
    assert J[0, 0] == pytest.approx(D[0, 0] ** 2 / M[0, 0])
    se = np.sqrt(cov[0, 0])
    assert se == pytest.approx(np.sqrt(M[0, 0]) / (abs(D[0, 0]) * np.sqrt(len(x))), rel=1e-10)
    assert se == pytest.approx(x.std() / np.sqrt(len(x)), rel=1e-8)


@pytest.fixture(scope="module")
def normal_fit():
    data = generate_dataset(preset("normal-1f-gauss", m=200, seed=21))
    return data, fit_two_stage(data, FactorCopulaSpec(1, "gaussian"))


def test_structure(normal_fit):
    data, fit = normal_fit
    g = fit.godambe
    k = fit.marginal.n_params + 1
    assert g.M.shape == g.J.shape == g.D.shape == (k, k)
    assert np.allclose(g.M, g.M.T)
    assert np.min(np.linalg.eigvalsh(g.M)) >= -1e-12
    assert np.allclose(g.J, g.J.T)
    # stage-2 scores depend on the marginal parameters through the PITs
    assert np.max(np.abs(g.D[-1, :-1])) > 1e-3
    assert g.names[-1] == "rho1" and np.all(g.se > 0)
    assert set(g.to_dict()) >= {"names", "se", "D", "M", "J"}


def test_se_matches_bootstrap(normal_fit):
    data, fit = normal_fit
    rng = np.random.default_rng(123)
    spec = FactorCopulaSpec(1, "gaussian")
    boots = []
    for _ in range(200):
        idx = rng.integers(0, data.m, size=data.m)
        b = fit_two_stage(data.resample(idx), spec, godambe=False)
        boots.append(np.concatenate([mg.natural_vector(data, b.marginal.params), [b.factor.rho1]]))
    sd = np.std(boots, axis=0, ddof=1)
    ratio = fit.godambe.se / sd
    assert np.all((ratio > 0.75) & (ratio < 1.25)), ratio


def test_singular_information_raises():
    # singletons carry no information on rho
    data = generate_dataset(preset("normal-1f-gauss", m=60, seed=3, d=1, prune_p=1.0))
    with pytest.raises(GodambeError, match="more data or a simpler model"):
        fit_two_stage(data, FactorCopulaSpec(1, "gaussian"))
    res = fit_two_stage(data, FactorCopulaSpec(1, "gaussian"), strict_se=False)
    assert res.godambe is None and res.factor.warnings


def test_two_factor_t_se():
    data = generate_dataset(preset("binary-2f-t", m=150, seed=4))
    fit = fit_two_stage(data, FactorCopulaSpec(2, "student_t", nu=4.0))
    se = fit.standard_errors()
    assert set(se) >= {"rho1", "rho2"} and np.isfinite(se["rho1"])
