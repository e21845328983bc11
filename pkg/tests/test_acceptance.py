"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Every criterion runs at its stated tolerance. The Monte-Carlo criteria are
slow (the whole file takes roughly an hour on one core).
"""

import json
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from ratiocate.contrast import ContrastConfig, DiscreteInstance, orthogonality_check, solve_contrast
from ratiocate.data import make_folds, normalize_exposure
from ratiocate.glm import fit_logistic
from ratiocate.nuisance import ConstantPropensity, NuisanceConfig, fit_nuisance_bundle
from ratiocate.sim.dgp import censoring_rate, generate, get_setting
from ratiocate.sim.study import StudyConfig, run_study, toy_confounding_check
from ratiocate.survival import check_spurious_hr
from ratiocate.validate import check_monotone_ad, odds_ratio_counterexample, random_discrete_law

pytestmark = pytest.mark.slow
ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def verdict(capsys):
    """``verdict(label, ok, detail)`` prints the criterion line, then asserts."""

    def emit(label, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}", flush=True)
        assert ok, f"{label}: {detail}"

    return emit


def test_c1_toy_confounding(verdict):
    t0 = time.perf_counter()
    rep = toy_confounding_check(n=100_000, seed=0, adjusted=True)
    secs = time.perf_counter() - t0
    checks = [
        np.all(np.abs(rep.beta1 - [-0.5, 0.8]) <= 0.05),
        np.all(np.abs(rep.beta0 - [-0.5, -0.8]) <= 0.05),
        abs(rep.naive_slope - 1.6) <= 0.1,
        abs(rep.tworeg_slope) <= 0.1,
        abs(rep.contrast_slope) <= 0.1,
        secs < 60,
    ]
    detail = (
        f"beta1={np.round(rep.beta1, 3).tolist()} beta0={np.round(rep.beta0, 3).tolist()} "
        f"naive={rep.naive_slope:.3f} tworeg={rep.tworeg_slope:.3f} contrast={rep.contrast_slope:.3f} ({secs:.0f}s)"
    )
    verdict("C1 toy confounding", all(checks), detail)


def _bias_coverage(replicates):
    rows, secs = {}, 0.0
    for setting in ("setting1_contrast", "setting2_poisson"):
        cfg = StudyConfig(n=5000, replicates=replicates, methods=("contrast",), curves=False)
        t0 = time.perf_counter()
        res = run_study(setting, cfg)
        secs += time.perf_counter() - t0
        rows[setting] = (res.bias_coverage_table(), res.failure_counts())
    return rows, secs


def _summarize(rows):
    bias = max(abs(r["bias"]) for table, _ in rows.values() for r in table)
    cov = [r["coverage"] for table, _ in rows.values() for r in table]
    fails = {s: f for s, (_, f) in rows.items() if f}
    return bias, min(cov), max(cov), fails


def test_c2_bias_and_coverage_smoke(verdict):
    rows, secs = _bias_coverage(50)
    bias, lo, hi, fails = _summarize(rows)
    ok = bias <= 0.05 and lo >= 0.84 and hi <= 1.0 and not fails and secs <= 300
    verdict("C2 smoke (50 reps)", ok, f"max|bias|={bias:.4f} coverage=[{lo:.3f}, {hi:.3f}] failures={fails} ({secs:.0f}s)")


def test_c2_bias_and_coverage(verdict):
    rows, secs = _bias_coverage(400)
    bias, lo, hi, fails = _summarize(rows)
    ok = bias <= 0.05 and lo >= 0.89 and hi <= 0.98 and not fails
    per = "; ".join(
        f"{s}: " + " ".join(f"{r['term']}={r['bias']:+.3f}/{r['coverage']:.3f}" for r in table) for s, (table, _) in rows.items()
    )
    verdict("C2 bias/coverage (400 reps)", ok, f"max|bias|={bias:.4f} coverage=[{lo:.3f}, {hi:.3f}] failures={fails} ({secs:.0f}s, one core) | {per}")


def _medians(setting, reps=50):
    cfg = StudyConfig(n=5000, replicates=reps, curves=False)
    res = run_study(setting, cfg)
    return {m: res.median_correlation(m) for m in cfg.methods}, res.failure_counts()


def test_c3_ordering(verdict):
    s1, f1 = _medians("setting1_contrast")
    s2, f2 = _medians("setting2_poisson")
    s4, f4 = _medians("setting4_large")
    ok1 = all(s1["contrast"] > v for m, v in s1.items() if m != "contrast")
    ok2 = all(s2["naive"] >= v for v in s2.values()) and s2["naive"] - s2["contrast"] <= 0.05
    ok4 = s4["contrast"] >= s4["naive"]
    fmt = lambda d: " ".join(f"{m}={v:.3f}" for m, v in d.items())
    detail = f"setting1 [{fmt(s1)}] ok={ok1}; setting2 [{fmt(s2)}] ok={ok2}; setting4 [{fmt(s4)}] ok={ok4}; failures={f1 or f2 or f4 or {}}"
    verdict("C3 correlation ordering", ok1 and ok2 and ok4, detail)


def test_c4_monotone_ad_and_odds_ratio(verdict):
    rng = np.random.default_rng(20240)
    held = sum(check_monotone_ad(random_discrete_law(rng)).holds for _ in range(100))
    ore = odds_ratio_counterexample()
    ok = held == 100 and abs(ore.top_marginal_or - 1.14) <= 0.01 and abs(ore.best_marginal_or - 1.66) <= 0.01
    verdict("C4 monotone AD + OR counterexample", ok, f"{held}/100 laws; ORs {ore.top_marginal_or:.4f}, {ore.best_marginal_or:.4f}")


def test_c5_neyman_orthogonality(verdict):
    rng = np.random.default_rng(77)
    k = 8
    z = rng.normal(size=(k, 2))
    prob = rng.dirichlet(np.ones(k))
    mu0 = np.exp(rng.normal(0.3, 0.4, k))
    pi1 = rng.uniform(0.3, 0.7, k)
    delta0 = np.array([0.2, 0.4, -0.3])
    inst = DiscreteInstance.from_contrast(z, prob, mu0, pi1, delta0)
    at0, at_half = [], []
    for _ in range(20):
        d_mu = rng.normal(0, 0.5, k)
        d_pi = np.clip(rng.normal(0, 0.2, k), -0.5, 0.5)
        at0.append(orthogonality_check(inst, delta0, d_mu, d_pi, r=0.0))
        at_half.append(orthogonality_check(inst, delta0, d_mu, d_pi, r=0.5))
    big = int(np.sum(np.array(at_half) > 1e-3))
    ok = max(at0) <= 1e-6 and big >= 15
    verdict("C5 Neyman orthogonality", ok, f"max|d/dr| at 0 = {max(at0):.2e}; {big}/20 exceed 1e-3 at r=0.5")


class _ConstantMean:
    def __init__(self, y):
        self.m = float(np.mean(y))

    def predict(self, z):
        return np.full(np.asarray(z).shape[0], self.m)


def _dr_errors(n, reps, suite):
    spec = get_setting("setting2_poisson")
    errs = []
    for i in range(reps):
        seed = 1000 * n + i
        sim = generate(spec, n, seed, randomized=(suite == "b"))
        ds = normalize_exposure(sim.dataset)
        plan = make_folds(ds.n, 5, ds.r, seed)
        if suite == "a":
            # intercept-only outcome model is wrong; the logistic propensity is the true form
            bundle = fit_nuisance_bundle(ds, plan, fit_outcome=lambda z, y, w=None: _ConstantMean(y), fit_propensity=fit_logistic)
        else:
            bundle = fit_nuisance_bundle(ds, plan, NuisanceConfig(outcome_learner="glm"), fit_propensity=lambda z, r: ConstantPropensity(0.5))
        fit = solve_contrast(ds, bundle, ContrastConfig())
        errs.append(np.linalg.norm(fit.delta - spec.delta0))
    return float(np.median(errs))


@pytest.mark.parametrize("suite", ["a", "b"])
def test_c6_double_robustness(verdict, suite):
    med = [_dr_errors(n, 50, suite) for n in (2000, 8000, 32000)]
    ok = med[0] > med[1] > med[2]
    label = {"a": "wrong outcome, correct propensity", "b": "correct outcome, constant propensity"}[suite]
    verdict(f"C6{suite} double robustness ({label})", ok, "median |delta-delta0| at n=2000/8000/32000: " + ", ".join(f"{m:.4f}" for m in med))


def test_c7_sandwich_vs_bootstrap(verdict):
    ds = normalize_exposure(generate("setting2_poisson", 5000, seed=7).dataset)
    nuis = NuisanceConfig(outcome_learner="glm")
    cc = ContrastConfig()

    def fit(d, seed):
        plan = make_folds(d.n, cc.folds, d.r, seed)
        return solve_contrast(d, fit_nuisance_bundle(d, plan, replace(nuis, seed=seed)), cc)

    base = fit(ds, 0)
    rng = np.random.default_rng(8)
    boot = []
    for b in range(200):
        idx = rng.integers(0, ds.n, ds.n)
        boot.append(fit(ds.subset(idx), b + 1).delta)
    var_boot = np.var(np.array(boot), axis=0, ddof=1)
    var_sand = np.diag(base.covariance)
    rel = np.abs(var_sand / var_boot - 1)
    verdict("C7 sandwich vs bootstrap", bool(np.all(rel <= 0.25)), f"max relative difference {rel.max():.3f} (per term: {np.round(rel, 3).tolist()})")


def test_c8_survival(verdict):
    hr = check_spurious_hr(100_000, seed=0)
    ok_hr = abs(hr["beta1"] + 1.85) <= 0.1 and abs(hr["beta0"] + 1.55) <= 0.1

    cfg = StudyConfig(n=5000, replicates=50, curves=False)
    res = run_study("surv1", cfg)
    med = {m: res.median_correlation(m) for m in cfg.methods}
    ok_order = min(med["contrast"], med["tworeg"]) > max(med["naive"], med["boosting_ratio"])

    rates = {s: censoring_rate(generate(s, 100_000, seed=1)) for s in ("surv1", "surv2")}
    ok_cens = all(abs(v - 0.83) <= 0.02 for v in rates.values())
    detail = (
        f"HR slopes ({hr['beta1']:.3f}, {hr['beta0']:.3f}) ok={ok_hr}; "
        f"surv1 medians {', '.join(f'{m}={v:.3f}' for m, v in med.items())} ok={ok_order}; "
        f"censoring {', '.join(f'{s}={v:.3f}' for s, v in rates.items())} ok={ok_cens}"
    )
    verdict("C8 survival", ok_hr and ok_order and ok_cens, detail)


def test_c9_cli_end_to_end(verdict, tmp_path):
    data = ROOT / "data" / "synthetic_train.csv"
    run = lambda *a: subprocess.run([sys.executable, "-m", "ratiocate", *a], capture_output=True, text=True)
    fit = run("fit", "--input", str(data), "--method", "contrast,tworeg,naive,boost", "--seed", "1", "--out", str(tmp_path))
    scores = tmp_path / "scores.csv"
    val = run("validate", "--input", str(data), "--scores", str(scores), "--score-column", "contrast", "--oracle", "setting2_poisson", "--out", str(tmp_path))
    ok = fit.returncode == 0 and val.returncode == 0
    detail = f"fit exit {fit.returncode}, validate exit {val.returncode}"
    if ok:
        doc = json.loads((tmp_path / "curve_contrast.json").read_text())
        ad = np.array([p["ad"] for p in doc.get("points", [])], float) if doc.get("points") else None
        weights = (tmp_path / "weights.txt").read_text()
        ok = ad is not None and np.all(np.isfinite(ad)) and "contrast standard errors" in weights
        detail += f"; AD curve {np.round(ad, 3).tolist() if ad is not None else None}"
    else:
        detail += f"; stderr {fit.stderr.strip()[:200]} {val.stderr.strip()[:200]}"
    verdict("C9 CLI end to end on bundled data", ok, detail)
