"""Monte-Carlo harness: replicate, fit every method, score against the truth, aggregate."""

from __future__ import annotations

import csv
import functools
import os
import time
import traceback
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import pearsonr, spearmanr

from ..contrast import ContrastConfig, solve_contrast
from ..data import make_folds, normalize_exposure
from ..nuisance import NuisanceConfig, fit_nuisance_bundle, outcome_fitter
from ..rng import child_seed
from ..survival import (
    SurvivalConfig,
    fit_rmtl_boosting,
    fit_rmtl_naive,
    fit_rmtl_two_regression,
    fit_survival_nuisance,
    solve_rmtl_contrast,
)
from ..tworeg import fit_naive, fit_two_regression
from ..validate import DEFAULT_Q_GRID
from .dgp import DgpSpec, generate, get_setting, quasi_covariates

METHODS = ("contrast", "tworeg", "naive", "boosting_ratio")
ORACLE_DRAWS = 10**6
EVAL_DRAWS = 2**15


@functools.lru_cache(maxsize=8)
def _quasi(n: int, seed: int) -> np.ndarray:
    z = quasi_covariates(n, seed)
    z.setflags(write=False)
    return z


def true_population_ad(spec: DgpSpec | str, score, q: float, n_draws: int = ORACLE_DRAWS, seed: int = 0) -> float:
    """Population ``AD`` of the subgroup formed by the top ``q`` fraction of ``score``.

    ``score`` maps an ``(m, 10)`` covariate array to scores. Expectations over
    the covariate law use ``n_draws`` scrambled-Sobol points; outcome noise
    enters only through the exact means.
    """
    spec = get_setting(spec) if isinstance(spec, str) else spec
    z = _quasi(n_draws, seed)
    return population_ad_curve(spec, np.asarray(score(z), float), [q], z)[0]


def population_ad_curve(spec: DgpSpec, scores, q_grid, z) -> np.ndarray:
    """Population ``AD`` at every ``q`` for scores already evaluated on ``z``."""
    mu0, mu1 = spec.mu0(z), spec.mu1(z)
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    c0 = np.cumsum(mu0[order])
    c1 = np.cumsum(mu1[order])
    n = scores.size
    out = []
    for q in q_grid:
        if q >= 1:
            m = n
        else:
            # every point tied with the boundary score is included
            c = s_sorted[max(1, int(np.ceil(q * n - 1e-9))) - 1]
            m = int(np.searchsorted(-s_sorted, -c, side="right"))
        out.append(c1[m - 1] / c0[m - 1])
    return np.array(out)


@dataclass
class ReplicateReport:
    replicate: int
    seed: int
    pearson: dict = field(default_factory=dict)
    spearman: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    delta_error: np.ndarray | None = None
    std_errors: np.ndarray | None = None
    covered: np.ndarray | None = None
    failures: dict = field(default_factory=dict)
    seconds: float = 0.0


@dataclass(frozen=True)
class StudyConfig:
    n: int = 5000
    replicates: int = 50
    seed: int = 0
    methods: tuple = METHODS
    folds: int = 7
    partition_replicates: int = 1
    symmetric: bool = True
    learner: str = "boosted"
    q_grid: tuple = DEFAULT_Q_GRID
    eval_draws: int = EVAL_DRAWS
    curves: bool = True
    jobs: int = 1

    def __post_init__(self):
        if not self.methods:
            raise ValueError("at least one method is required")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}; valid: {', '.join(METHODS)}")


def _count_scores(spec, sim, cfg: StudyConfig, seed: int):
    ds = normalize_exposure(sim.dataset)
    want = set(cfg.methods)
    scores, extra = {}, {}
    nuis = NuisanceConfig(outcome_learner=cfg.learner, seed=child_seed(seed, "nuisance"))
    bundle = None
    if want & {"contrast", "tworeg"} or (want & {"boosting_ratio"} and cfg.learner == "boosted"):
        bundles = []
        for rep in range(cfg.partition_replicates if "contrast" in want else 1):
            plan = make_folds(ds.n, cfg.folds, ds.r, child_seed(seed, "folds", rep))
            bundles.append(fit_nuisance_bundle(ds, plan, replace(nuis, seed=child_seed(seed, "nuisance", rep))))
        bundle = bundles[0]
    yield_ = {}

    def attempt(name, fn):
        try:
            yield_[name] = fn()
        except Exception as exc:  # recorded, never dropped silently
            extra.setdefault("failures", {})[name] = f"{type(exc).__name__}: {exc}"

    if "contrast" in want:

        def run_contrast():
            cc = ContrastConfig(symmetric=cfg.symmetric, folds=cfg.folds)
            fits = [solve_contrast(ds, b, cc) for b in bundles]
            fit = replace(fits[0], delta=np.mean([f.delta for f in fits], axis=0), partition_replicates=len(fits))
            extra["contrast_fit"] = fit
            return fit.predict_log_cate

        attempt("contrast", run_contrast)
    if "tworeg" in want:
        attempt("tworeg", lambda: fit_two_regression(ds, bundle).predict_log_cate)
    if "naive" in want:
        attempt("naive", lambda: fit_naive(ds).predict_log_cate)
    if "boosting_ratio" in want:

        def run_boost():
            counts = (bundle.meta.get("n_trees") if bundle is not None else None) or {}
            models = []
            for arm in (0, 1):
                rows = ds.r == arm
                fit = outcome_fitter(replace(nuis, outcome_learner="boosted"), counts.get(arm))
                models.append(fit(ds.z[rows], ds.y[rows]))
            m0, m1 = models
            return lambda z: np.log(m1.predict(z)) - np.log(m0.predict(z))

        attempt("boosting_ratio", run_boost)
    scores.update(yield_)
    return scores, extra


def _survival_scores(spec, sim, cfg: StudyConfig, seed: int):
    ds = sim.dataset
    want = set(cfg.methods)
    extra, scores = {}, {}
    nuis_cfg = NuisanceConfig(outcome_learner="boosted", seed=child_seed(seed, "nuisance"))
    scfg = SurvivalConfig(tau=spec.tau, folds=cfg.folds, nuisance=nuis_cfg, outcome_learner="boosted" if cfg.learner == "boosted" else "rmst")
    nuis = None

    def attempt(name, fn):
        try:
            scores[name] = fn()
        except Exception as exc:
            extra.setdefault("failures", {})[name] = f"{type(exc).__name__}: {exc}"

    if want & {"contrast", "tworeg"}:
        plan = make_folds(ds.n, cfg.folds, ds.r, child_seed(seed, "folds", 0))
        try:
            nuis = fit_survival_nuisance(ds, plan, scfg)
        except Exception as exc:
            for m in want & {"contrast", "tworeg"}:
                extra.setdefault("failures", {})[m] = f"{type(exc).__name__}: {exc}"
    if nuis is not None and "contrast" in want:

        def run_contrast():
            fit = solve_rmtl_contrast(ds, nuis, ContrastConfig(symmetric=cfg.symmetric, folds=cfg.folds))
            extra["contrast_fit"] = fit
            return fit.predict_log_cate

        attempt("contrast", run_contrast)
    if nuis is not None and "tworeg" in want:
        attempt("tworeg", lambda: fit_rmtl_two_regression(ds, nuis).predict_log_cate)
    if "naive" in want:
        attempt("naive", lambda: fit_rmtl_naive(ds, spec.tau).predict_log_cate)
    if "boosting_ratio" in want:

        def run_boost():
            counts = nuis.bundle.meta.get("n_trees") if nuis is not None else None
            m0, m1 = fit_rmtl_boosting(ds, spec.tau, nuis_cfg, n_trees=counts)
            return lambda z: np.log(m1.predict(z)) - np.log(m0.predict(z))

        attempt("boosting_ratio", run_boost)
    return scores, extra


def run_replicate(spec: DgpSpec | str, cfg: StudyConfig, i: int) -> ReplicateReport:
    """Generate replicate ``i``, fit every configured method and score it."""
    spec = get_setting(spec) if isinstance(spec, str) else spec
    t0 = time.perf_counter()
    seed = child_seed(cfg.seed, "replicate", i)
    rep = ReplicateReport(i, seed)
    sim = generate(spec, cfg.n, seed)
    if spec.kind == "count":
        scores, extra = _count_scores(spec, sim, cfg, seed)
    elif spec.kind == "survival":
        scores, extra = _survival_scores(spec, sim, cfg, seed)
    else:
        raise ValueError(f"setting {spec.name!r} is not a study setting")
    rep.failures = extra.get("failures", {})

    z_eval = _quasi(cfg.eval_draws, 0)
    truth = spec.true_log_cate(z_eval)
    for name in cfg.methods:
        if name not in scores:
            continue
        s = np.asarray(scores[name](z_eval), float)
        if np.ptp(s) == 0 or not np.all(np.isfinite(s)):
            rep.failures[name] = "score is constant or non-finite"
            continue
        rep.pearson[name] = float(pearsonr(s, truth)[0])
        rep.spearman[name] = float(spearmanr(s, truth)[0])
        if cfg.curves:
            rep.curves[name] = population_ad_curve(spec, s, cfg.q_grid, z_eval)
    if cfg.curves:
        rep.curves["truth"] = population_ad_curve(spec, truth, cfg.q_grid, z_eval)

    fit = extra.get("contrast_fit")
    if fit is not None and spec.delta0 is not None:
        rep.delta_error = fit.delta - spec.delta0
        rep.std_errors = fit.std_errors
        rep.covered = np.abs(rep.delta_error) <= 1.959963984540054 * fit.std_errors
    rep.seconds = time.perf_counter() - t0
    return rep


def _safe_replicate(spec, cfg, i):
    try:
        return run_replicate(spec, cfg, i)
    except Exception as exc:
        rep = ReplicateReport(i, child_seed(cfg.seed, "replicate", i))
        rep.failures["replicate"] = f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"
        return rep


@dataclass
class StudyResult:
    setting: str
    config: StudyConfig
    reports: list

    def failure_counts(self) -> dict:
        out = {}
        for r in self.reports:
            for k in r.failures:
                out[k] = out.get(k, 0) + 1
        return out

    def correlations(self, method: str, kind: str = "pearson") -> np.ndarray:
        return np.array([getattr(r, kind)[method] for r in self.reports if method in getattr(r, kind)])

    def median_correlation(self, method: str, kind: str = "pearson") -> float:
        v = self.correlations(method, kind)
        return float(np.median(v)) if v.size else float("nan")

    def correlation_table(self) -> list[dict]:
        rows = []
        for m in self.config.methods:
            for kind in ("pearson", "spearman"):
                v = self.correlations(m, kind)
                if v.size == 0:
                    rows.append({"method": m, "kind": kind, "n": 0})
                    continue
                q = np.quantile(v, [0.1, 0.25, 0.5, 0.75, 0.9])
                rows.append(
                    {"method": m, "kind": kind, "n": int(v.size), "q10": q[0], "q25": q[1], "median": q[2], "q75": q[3], "q90": q[4]}
                )
        return rows

    def bias_coverage_table(self, names=None) -> list[dict]:
        errs = [r.delta_error for r in self.reports if r.delta_error is not None]
        if not errs:
            return []
        E = np.array(errs)
        C = np.array([r.covered for r in self.reports if r.delta_error is not None])
        S = np.array([r.std_errors for r in self.reports if r.delta_error is not None])
        names = names or ["intercept"] + [f"z{j}" for j in range(1, E.shape[1])]
        delta0 = get_setting(self.setting).delta0
        return [
            {
                "term": names[j],
                "delta0": float(delta0[j]),
                "bias": float(E[:, j].mean()),
                "empirical_sd": float(E[:, j].std(ddof=1)) if len(E) > 1 else float("nan"),
                "mean_se": float(S[:, j].mean()),
                "coverage": float(C[:, j].mean()),
                "replicates": int(len(E)),
            }
            for j in range(E.shape[1])
        ]

    def median_curves(self) -> dict:
        out = {}
        keys = {k for r in self.reports for k in r.curves}
        for k in sorted(keys):
            arr = np.array([r.curves[k] for r in self.reports if k in r.curves])
            out[k] = np.median(arr, axis=0)
        return out

    def write_csvs(self, out_dir) -> list[str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = []

        def dump(name, rows):
            if not rows:
                return
            path = os.path.join(out_dir, name)
            cols = list(rows[0].keys())
            for r in rows:
                cols += [k for k in r if k not in cols]
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.DictWriter(fh, cols, lineterminator="\n")
                w.writeheader()
                w.writerows(rows)
            paths.append(path)

        dump(f"{self.setting}_bias_coverage.csv", self.bias_coverage_table())
        dump(f"{self.setting}_correlations.csv", self.correlation_table())
        curves = self.median_curves()
        if curves:
            rows = [{"q": q, **{k: float(v[i]) for k, v in curves.items()}} for i, q in enumerate(self.config.q_grid)]
            dump(f"{self.setting}_median_curves.csv", rows)
        dump(
            f"{self.setting}_failures.csv",
            [{"replicate": r.replicate, "method": k, "error": v.splitlines()[0]} for r in self.reports for k, v in r.failures.items()],
        )
        return paths


def run_study(spec: DgpSpec | str, config: StudyConfig = StudyConfig(), progress=None) -> StudyResult:
    """Run ``config.replicates`` independent replicates (in parallel when ``jobs > 1``)."""
    spec = get_setting(spec) if isinstance(spec, str) else spec
    idx = range(config.replicates)
    if config.jobs > 1:
        from joblib import Parallel, delayed

        reports = Parallel(n_jobs=config.jobs)(delayed(_safe_replicate)(spec.name, config, i) for i in idx)
    else:
        reports = []
        for i in idx:
            reports.append(_safe_replicate(spec, config, i))
            if progress is not None:
                progress(i + 1, config.replicates)
    return StudyResult(spec.name, config, list(reports))


@dataclass(frozen=True)
class ToyReport:
    beta1: np.ndarray
    beta0: np.ndarray
    naive_slope: float
    tworeg_slope: float | None = None
    contrast_slope: float | None = None

    def to_dict(self) -> dict:
        return {
            "beta1": self.beta1.tolist(),
            "beta0": self.beta0.tolist(),
            "naive_slope": self.naive_slope,
            "tworeg_slope": self.tworeg_slope,
            "contrast_slope": self.contrast_slope,
        }


def toy_confounding_check(n: int = 100_000, seed: int = 0, *, randomized: bool = False, adjusted: bool = False, learner: str = "boosted") -> ToyReport:
    """Naive per-arm Poisson fits on the confounded toy example.

    With ``adjusted=True`` the two-regression and contrast slopes (which
    should vanish, the true ratio being constant) are also reported.
    """
    ds = generate("toy_confounding", n, seed, randomized=randomized).dataset
    naive = fit_naive(ds)
    tw = ct = None
    if adjusted:
        plan = make_folds(ds.n, 7, ds.r, child_seed(seed, "folds"))
        bundle = fit_nuisance_bundle(ds, plan, NuisanceConfig(outcome_learner=learner, seed=child_seed(seed, "nuisance")))
        tw = float(fit_two_regression(ds, bundle).delta_implied[1])
        ct = float(solve_contrast(ds, bundle).delta[1])
    return ToyReport(naive.beta1, naive.beta0, float(naive.delta_implied[1]), tw, ct)
