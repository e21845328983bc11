import json
import warnings

import numpy as np
import pytest

from ratiocate.contrast import ContrastConfig, fit_contrast
from ratiocate.data import DataError, ObservationalDataset, add_intercept, make_folds
from ratiocate.glm import fit_poisson_glm
from ratiocate.nuisance import NuisanceConfig, fit_nuisance_bundle
from ratiocate.sim.study import toy_confounding_check
from ratiocate.tworeg import (
    CollinearityWarning,
    TwoRegressionFit,
    calibrate_arm,
    fit_naive,
    fit_two_regression,
    ipw_weights,
    project,
)

from conftest import poisson_data

GLM = NuisanceConfig(outcome_learner="glm")


def _nonlinear(n, seed, d0=0.0, confound=True):
    """Curved log-means in both arms with a constant ratio ``exp(d0)``."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, 2))
    pi = 1 / (1 + np.exp(-(0.6 * z[:, 0] - 0.4 * z[:, 1]))) if confound else np.full(n, 0.5)
    r = rng.binomial(1, pi)
    mu0 = np.exp(0.2 + 0.3 * z[:, 0] + 0.3 * z[:, 0] ** 2 - 0.2 * np.abs(z[:, 1]))
    mu1 = mu0 * np.exp(d0)
    y0, y1 = rng.poisson(mu0), rng.poisson(mu1)
    y = np.where(r == 1, y1, y0)
    return ObservationalDataset(z=z, r=r, y=y), dict(pi1=pi, mu0=mu0, mu1=mu1, y0=y0, y1=y1)


def test_ipw_weights():
    np.testing.assert_allclose(ipw_weights([1, 0, 1], [0.5, 0.5, 0.25], 1), [2, 0, 4])
    np.testing.assert_allclose(ipw_weights([1, 0, 1], [0.5, 0.5, 0.25], 0), [0, 2, 0])


def test_collinear_learner_drops_log_mu_and_matches_weighted_fit():
    ds, truth = poisson_data(3000, 1)
    X = ds.design
    mu_hat = np.exp(X @ np.array([0.1, 0.2, -0.3]))
    with pytest.warns(CollinearityWarning):
        cal = calibrate_arm(ds.z, ds.y, ds.r, mu_hat, truth["pi1"], 1)
    assert cal.dropped and cal.alpha == 0.0
    w = ipw_weights(ds.r, truth["pi1"], 1)
    keep = w > 0
    ref = fit_poisson_glm(ds.z[keep], ds.y[keep], w[keep]).coefficients
    np.testing.assert_allclose(cal.gamma, ref, atol=1e-8)


def test_true_nuisances_give_identity_calibration():
    ds, truth = _nonlinear(100_000, 2, d0=0.3)
    for arm, mu in ((0, truth["mu0"]), (1, truth["mu1"])):
        cal = calibrate_arm(ds.z, ds.y, ds.r, mu, truth["pi1"], arm)
        assert not cal.dropped
        assert abs(cal.alpha - 1) <= 0.05
        assert np.max(np.abs(cal.gamma)) <= 0.05


def test_calibration_weight_scale_invariance():
    ds, truth = _nonlinear(5000, 3)
    mu = truth["mu1"] * np.exp(0.2 * ds.z[:, 1])
    a = calibrate_arm(ds.z, ds.y, ds.r, mu, truth["pi1"], 1)
    b = calibrate_arm(ds.z, ds.y, ds.r, mu, truth["pi1"], 1, row_weights=np.full(ds.n, 2.0))
    assert a.alpha == pytest.approx(b.alpha, abs=1e-10)
    np.testing.assert_allclose(a.gamma, b.gamma, atol=1e-10)


def test_calibration_solves_weighted_equation():
    ds, truth = _nonlinear(4000, 4)
    mu_hat = np.exp(0.5 * ds.z[:, 0] ** 2)
    cal = calibrate_arm(ds.z, ds.y, ds.r, mu_hat, truth["pi1"], 0)
    w = ipw_weights(ds.r, truth["pi1"], 0)
    X = np.column_stack([np.log(mu_hat), ds.design])
    resid = ds.y - cal.apply(mu_hat, ds.z)
    assert np.max(np.abs(X.T @ (w * resid))) / w.sum() <= 1e-7


def test_project_fixed_point_and_constant():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(500, 3))
    b = np.array([0.2, -0.4, 0.1, 0.3])
    np.testing.assert_allclose(project(z, np.exp(add_intercept(z) @ b)), b, atol=1e-8)
    np.testing.assert_allclose(project(z, np.full(500, 2.5)), [np.log(2.5), 0, 0, 0], atol=1e-10)


def test_project_residuals_orthogonal():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(800, 2))
    mu_tilde = np.exp(np.sin(z[:, 0]) + 0.3 * z[:, 1] ** 2)
    beta = project(z, mu_tilde)
    X = add_intercept(z)
    assert np.max(np.abs(X.T @ (mu_tilde - np.exp(X @ beta)))) / z.shape[0] <= 1e-7


def test_project_rejects_nonpositive():
    with pytest.raises(ValueError):
        project(np.zeros((3, 1)), [1.0, 0.0, 2.0])


def test_toy_projections_differ_only_in_intercept():
    # correctly calibrated means in the toy example are equal, so projections share slopes
    rep = toy_confounding_check(100_000, seed=1, adjusted=True, learner="glm")
    assert abs(rep.tworeg_slope) <= 0.05


def test_no_heterogeneity_recovered_under_confounding():
    ds, _ = _nonlinear(100_000, 7, d0=0.4)
    plan = make_folds(ds.n, 2, ds.r, seed=0)
    fit = fit_two_regression(ds, fit_nuisance_bundle(ds, plan, GLM))
    assert np.max(np.abs(fit.delta_implied[1:])) <= 0.05
    assert fit.delta_implied[0] == pytest.approx(0.4, abs=0.05)
    # the naive difference is biased here
    assert np.max(np.abs(fit_naive(ds).delta_implied[1:])) > 0.1


def test_toy_naive_and_adjusted_slopes():
    rep = toy_confounding_check(100_000, seed=2, adjusted=True, learner="glm")
    np.testing.assert_allclose(rep.beta1, [-0.5, 0.8], atol=0.05)
    np.testing.assert_allclose(rep.beta0, [-0.5, -0.8], atol=0.05)
    assert rep.naive_slope == pytest.approx(1.6, abs=0.1)
    assert abs(rep.tworeg_slope) < 0.1 and abs(rep.contrast_slope) < 0.1


def test_randomized_tworeg_matches_naive():
    ds, truth = poisson_data(20_000, 8, confound=False)
    plan = make_folds(ds.n, 5, ds.r, seed=1)
    bundle = fit_nuisance_bundle(ds, plan, GLM)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CollinearityWarning)
        tw = fit_two_regression(ds, bundle)
    nv = fit_naive(ds)
    se = fit_contrast(ds, ContrastConfig(), GLM).std_errors
    assert np.all(np.abs(tw.delta_implied - nv.delta_implied) <= 2 * se)


def test_empty_arm_rejected():
    with pytest.raises(DataError):
        fit_naive(ObservationalDataset(z=[[0.0], [1.0]], r=[1, 1], y=[1, 2]))


def test_calibrated_mean_is_doubly_robust():
    # wrong initial learner, correct propensity: E[z~ (Y1 - mu~1)] vanishes
    ds, truth = _nonlinear(200_000, 9, d0=0.2)
    wrong = np.exp(0.4 * ds.z[:, 1] - 0.2 * ds.z[:, 0] ** 2)
    cal = calibrate_arm(ds.z, ds.y, ds.r, wrong, truth["pi1"], 1)
    resid = add_intercept(ds.z) * (truth["y1"] - cal.apply(wrong, ds.z))[:, None]
    mean, se = resid.mean(0), resid.std(0, ddof=1) / np.sqrt(ds.n)
    assert np.all(np.abs(mean) <= 4 * se)


def test_no_heterogeneity_slopes_shrink_with_n():
    med = []
    for n in (2000, 8000, 32000):
        slopes = []
        for rep in range(50):
            ds, _ = _nonlinear(n, 1000 * n + rep, d0=0.3)
            bundle = fit_nuisance_bundle(ds, make_folds(ds.n, 2, ds.r, seed=rep), GLM)
            slopes.append(np.max(np.abs(fit_two_regression(ds, bundle).delta_implied[1:])))
        med.append(np.median(slopes))
    assert med[0] > med[1] > med[2]


def test_json_round_trip():
    ds, _ = poisson_data(1000, 10)
    bundle = fit_nuisance_bundle(ds, make_folds(ds.n, 3, ds.r, seed=0), NuisanceConfig(n_trees=20))
    fit = fit_two_regression(ds, bundle)
    doc = json.loads(fit.to_json())
    assert doc["terms"] == ["intercept", "z1", "z2"]
    assert set(doc["calibration"]) == {"arm0", "arm1"}
    back = TwoRegressionFit.from_dict(doc)
    np.testing.assert_allclose(back.predict_cate(ds.z), fit.predict_cate(ds.z))
    with pytest.raises(ValueError):
        fit.predict_log_cate(np.zeros((2, 5)))
