import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ratiocate.data import ObservationalDataset, normalize_exposure
from ratiocate.glm import fit_poisson_glm
from ratiocate.sim.dgp import generate, get_setting
from ratiocate.sim.study import true_population_ad
from ratiocate.validate import (
    WHOLE_POPULATION,
    DiscreteLaw,
    NonPositiveMeanError,
    SubgroupError,
    ValidationConfig,
    augmented_means,
    check_monotone_ad,
    estimate_ad,
    estimate_subgroup,
    median_split,
    odds_ratio_counterexample,
    population_ad,
    quantile_threshold,
    random_discrete_law,
    sparkline,
    validation_curve,
)


def test_quantile_threshold_examples():
    assert quantile_threshold([1, 2, 3, 4], 0.5) == 3
    assert quantile_threshold([4, 1, 3, 2], 0.25) == 4
    assert quantile_threshold([1, 2, 3, 4], 1.0) == WHOLE_POPULATION == -math.inf
    assert quantile_threshold([7, 7, 7], 0.3) == 7
    with pytest.raises(ValueError):
        quantile_threshold([], 0.5)
    with pytest.raises(ValueError):
        quantile_threshold([1, 2], 0.0)


@given(
    st.lists(st.integers(-5, 5), min_size=1, max_size=60),
    st.floats(0.01, 1.0),
)
def test_quantile_subgroup_holds_top_fraction(values, q):
    s = np.asarray(values, float)
    c = quantile_threshold(s, q)
    k = math.ceil(q * s.size - 1e-9)
    sel = s >= c
    assert sel.sum() >= k
    # the k largest scores are always inside, and nothing below them is
    top = np.sort(s)[::-1][:k]
    assert c <= top.min()
    if q < 1:
        assert c == top.min()


def test_augmented_means_constant_outcomes():
    r = np.array([0, 1, 0, 1])
    y = np.where(r == 1, 3.0, 2.0)
    m1, m0 = augmented_means(y, r, np.full(4, 2.0), np.full(4, 3.0), np.full(4, 0.5))
    assert (m1, m0) == (3.0, 2.0)


def test_randomized_constant_outcomes_give_exact_ratio():
    rng = np.random.default_rng(0)
    n = 400
    z = rng.normal(size=(n, 2))
    r = rng.binomial(1, 0.5, n)
    y = np.where(r == 1, 3.0, 2.0)
    est = estimate_ad(ObservationalDataset(z=z, r=r, y=y), z[:, 0], -np.inf)
    assert est.ad == pytest.approx(1.5, abs=1e-9)
    assert est.m_c == n and est.n_treated == r.sum()


def test_subgroup_without_controls_rejected():
    rng = np.random.default_rng(1)
    n = 200
    z = rng.normal(size=(n, 1))
    r = (z[:, 0] > 0).astype(int)
    ds = ObservationalDataset(z=z, r=r, y=rng.poisson(2, n))
    with pytest.raises(SubgroupError):
        estimate_ad(ds, z[:, 0], 0.0)


def test_small_subgroup_rejected():
    rng = np.random.default_rng(2)
    ds = ObservationalDataset(z=rng.normal(size=(100, 1)), r=np.arange(100) % 2, y=rng.poisson(2, 100))
    with pytest.raises(SubgroupError):
        estimate_ad(ds, np.arange(100.0), 80.0)


class _Constant:
    def __init__(self, v):
        self.v = v

    def predict(self, z):
        return np.full(len(z), self.v)


def test_nonpositive_control_mean_rejected():
    n = 120
    z = np.zeros((n, 1))
    r = (np.arange(n) < 40).astype(int)
    y = np.zeros(n)
    y[r == 1] = 1.0
    ds = ObservationalDataset(z=z, r=r, y=y)
    fit = lambda zz, yy, w=None: _Constant(10.0)
    with pytest.raises(NonPositiveMeanError):
        estimate_subgroup(ds, np.ones(n, bool), fit_outcome=fit, propensity=lambda zz: np.full(len(zz), 0.5))


def _delta_method_se(ds, mask, est):
    """Standard error of the subgroup ratio from the per-row augmented terms (GLM outcome, logistic pi)."""
    from ratiocate.glm import fit_logistic

    z, r, y = ds.z[mask], ds.r[mask], ds.y[mask]
    pi = fit_logistic(z, r).predict(z)
    mu = [fit_poisson_glm(z[r == a], y[r == a]).predict(z) for a in (0, 1)]
    a1 = mu[1] + r / pi * (y - mu[1])
    a0 = mu[0] + (1 - r) / (1 - pi) * (y - mu[0])
    infl = (a1 - est.ad * a0) / est.mu0_hat
    return infl.std(ddof=1) / np.sqrt(mask.sum())


def test_setting1_true_score_matches_population_oracle():
    spec = get_setting("setting1_contrast")
    sim = generate(spec, 100_000, seed=5)
    ds = normalize_exposure(sim.dataset)
    c = quantile_threshold(sim.true_cate, 0.25)
    est = estimate_ad(ds, sim.true_cate, c)
    truth = true_population_ad(spec, spec.true_cate, 0.25)
    se = _delta_method_se(ds, sim.true_cate >= c, est)
    assert abs(est.ad - truth) <= 3 * se


def test_curve_structure_and_whole_population_point():
    sim = generate("setting2_poisson", 3000, seed=6)
    ds = normalize_exposure(sim.dataset)
    curve = validation_curve(ds, sim.true_cate, (0.2, 0.5, 0.8, 1.0))
    assert list(curve.q) == [0.2, 0.5, 0.8, 1.0]
    cs = [p.c for p in curve.points]
    assert all(a >= b for a, b in zip(cs, cs[1:]))
    full = estimate_ad(ds, sim.true_cate, -np.inf)
    assert curve.ad[-1] == pytest.approx(full.ad, rel=1e-12)
    sizes = [p.estimate.m_c for p in curve.points]
    assert sizes == sorted(sizes)


def test_constant_score_flat_curve():
    sim = generate("setting2_poisson", 2000, seed=7)
    ds = normalize_exposure(sim.dataset)
    curve = validation_curve(ds, np.ones(ds.n), (0.3, 0.6, 1.0))
    assert np.ptp(curve.ad) == 0
    split = median_split(ds, np.ones(ds.n))
    assert split.high.m_c + split.low.m_c == ds.n
    assert abs(split.high.m_c - split.low.m_c) <= 1


def test_failing_grid_points_are_marked_not_fabricated():
    sim = generate("setting2_poisson", 600, seed=8)
    ds = normalize_exposure(sim.dataset)
    curve = validation_curve(ds, sim.true_cate, (0.01, 0.5, 1.0))
    first = curve.points[0]
    assert first.estimate is None and first.reason
    assert math.isnan(curve.ad[0]) and np.isfinite(curve.ad[1:]).all()
    rec = curve.records()[0]
    assert rec["ad"] is None or (isinstance(rec["ad"], float) and math.isnan(rec["ad"]))


def test_curve_exports():
    sim = generate("setting2_poisson", 1500, seed=9)
    ds = normalize_exposure(sim.dataset)
    curve = validation_curve(ds, sim.true_cate, (0.5, 1.0), score_name="truth")
    header = curve.to_csv().splitlines()[0]
    assert header == "q,threshold,m_c,mu1,mu0,ad"
    doc = json.loads(curve.to_json())
    assert doc["score"] == "truth" and doc["metric"] == "rate_ratio"
    assert doc["points"][-1]["threshold"] is None
    assert len(curve.gnuplot_table().strip().splitlines()) >= 2
    assert len(curve.sparkline()) == 2


def test_sparkline():
    assert sparkline([1, 2, 3]) == "▁▅█"
    assert len(set(sparkline([2, 2, 2]))) == 1
    assert sparkline([1.0, float("nan"), 2.0])[1] == "·"


def test_population_curve_true_score_monotone_and_anti_score_reversed():
    spec = get_setting("setting1_contrast")
    grid = (0.1, 0.25, 0.5, 0.75, 1.0)
    ad = [true_population_ad(spec, spec.true_cate, q, n_draws=2**17) for q in grid]
    assert all(a >= b - 1e-12 for a, b in zip(ad, ad[1:]))
    anti = lambda z: -spec.true_log_cate(z)
    assert true_population_ad(spec, anti, 0.25, n_draws=2**17) <= true_population_ad(spec, anti, 1.0, n_draws=2**17)


def test_population_constant_score_gives_overall_ratio():
    spec = get_setting("setting2_poisson")
    const = lambda z: np.zeros(len(z))
    vals = {true_population_ad(spec, const, q, n_draws=2**16) for q in (0.2, 0.7, 1.0)}
    assert len(vals) == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 25))
def test_monotone_ad_on_random_laws(seed, k):
    rep = check_monotone_ad(random_discrete_law(np.random.default_rng(seed), k))
    assert rep.monotone and rep.ad_at_least_c, (rep.max_decrease, rep.max_shortfall)


def test_monotone_ad_below_minimum_is_overall_ratio():
    law = random_discrete_law(np.random.default_rng(3))
    overall = np.dot(law.prob, law.mu1) / np.dot(law.prob, law.mu0)
    assert population_ad(law.prob, law.mu0, law.mu1, law.ratio, law.ratio.min() - 1) == pytest.approx(overall, rel=1e-14)


def test_monotone_ad_detects_a_bad_ranking():
    # ranking by something other than the true ratio can violate monotonicity
    law = DiscreteLaw(np.array([0.5, 0.5]), np.array([1.0, 1.0]), np.array([3.0, 1.0]))
    assert population_ad(law.prob, law.mu0, law.mu1, [0.0, 1.0], 1.0) < population_ad(law.prob, law.mu0, law.mu1, [0.0, 1.0], 0.0)


def test_odds_ratio_is_not_monotone():
    ex = odds_ratio_counterexample()
    assert ex.best_marginal_or > ex.top_marginal_or + 0.4
    assert len(ex.best_subset) == 10
    # every top-ranked patient has a conditional OR above the marginal OR of the group
    assert ex.top_min_conditional_or > ex.top_marginal_or


def _dr_errors(n, rep, suite):
    rng = np.random.default_rng(10_000 * n + rep)
    z = rng.normal(size=(n, 2))
    pi = 1 / (1 + np.exp(-(0.8 * z[:, 0] - 0.5 * z[:, 1])))
    r = rng.binomial(1, pi)
    mu0 = np.exp(0.3 + 0.5 * z[:, 0] - 0.3 * z[:, 1])
    mu1 = mu0 * np.exp(0.4 + 0.3 * z[:, 0])
    y = rng.poisson(np.where(r == 1, mu1, mu0))
    ds = ObservationalDataset(z=z, r=r, y=y)
    truth = 0.0
    # population ratio by a large independent Monte-Carlo sample
    zz = np.random.default_rng(99).normal(size=(400_000, 2))
    m0 = np.exp(0.3 + 0.5 * zz[:, 0] - 0.3 * zz[:, 1])
    truth = np.mean(m0 * np.exp(0.4 + 0.3 * zz[:, 0])) / np.mean(m0)
    if suite == "wrong_outcome":
        fit = lambda zz_, yy, w=None: _Constant(float(np.mean(yy)))
        est = estimate_subgroup(ds, np.ones(n, bool), fit_outcome=fit)
    else:
        est = estimate_subgroup(ds, np.ones(n, bool), propensity=lambda zz_: np.full(len(zz_), 0.5))
    return abs(est.ad - truth)


@pytest.mark.parametrize("suite", ["wrong_outcome", "wrong_propensity"])
def test_subgroup_estimator_doubly_robust(suite):
    med = [np.median([_dr_errors(n, rep, suite) for rep in range(30)]) for n in (2000, 8000, 32000)]
    assert med[0] > med[1] > med[2]


def test_config_bounds():
    assert ValidationConfig().min_subgroup_size == 50 and ValidationConfig().min_per_arm == 10
