"""Validation curves for ratio CATE scores.

For a score ``D_hat`` the subgroup ``{D_hat(z) >= c}`` has the average
effect ratio ``AD(c) = E(Y1 | D_hat >= c) / E(Y0 | D_hat >= c)``. It is
estimated on held-out data with augmented inverse-propensity means whose
nuisance models are refitted inside the subgroup. Ranking by the true ratio
makes the population ``AD(c)`` non-decreasing with ``AD(c) >= c``;
``check_monotone_ad`` verifies that on finite supports.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import ObservationalDataset
from .glm import DEFAULT_CLIP_EPS, DEFAULT_CLIP_MU, fit_logistic
from .nuisance import NuisanceConfig, outcome_fitter

DEFAULT_Q_GRID = tuple(round(0.1 * k, 10) for k in range(1, 11))
MIN_SUBGROUP_SIZE = 50
MIN_PER_ARM = 10
WHOLE_POPULATION = -math.inf


class SubgroupError(ValueError):
    """A subgroup is too small, or lacks one of the arms."""


class NonPositiveMeanError(ArithmeticError):
    """The augmented control-arm mean came out non-positive."""


@dataclass(frozen=True)
class ValidationConfig:
    min_subgroup_size: int = MIN_SUBGROUP_SIZE
    min_per_arm: int = MIN_PER_ARM
    outcome_learner: str = "glm"
    clip_eps: float = DEFAULT_CLIP_EPS
    clip_mu: float = DEFAULT_CLIP_MU
    seed: int = 0

    def nuisance(self) -> NuisanceConfig:
        return NuisanceConfig(outcome_learner=self.outcome_learner, clip_eps=self.clip_eps, clip_mu=self.clip_mu, seed=self.seed)


def quantile_threshold(scores, q: float) -> float:
    """Threshold ``c`` whose subgroup ``{score >= c}`` is the top ``q`` fraction.

    ``c`` is the ``ceil(q n)``-th largest score, i.e. the generalized inverse
    of the empirical distribution at ``1 - q`` taken from the left. Ties at
    ``c`` are all included, so the subgroup has at least ``ceil(q n)`` rows.
    ``q = 1`` returns ``-inf`` (everyone).
    """
    s = np.sort(np.asarray(scores, float).ravel())
    if s.size == 0:
        raise ValueError("scores are empty")
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    if q == 1:
        return WHOLE_POPULATION
    # guard against q*n landing a hair above an integer
    m = max(1, math.ceil(q * s.size - 1e-9))
    return float(s[s.size - m])


@dataclass(frozen=True)
class SubgroupAdEstimate:
    c: float
    m_c: int
    n_treated: int
    n_control: int
    mu1_hat: float
    mu0_hat: float

    @property
    def ad(self) -> float:
        return self.mu1_hat / self.mu0_hat

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ad"] = self.ad
        return d


def augmented_means(y, r, mu0, mu1, pi1, row_weights=None) -> tuple[float, float]:
    """Augmented inverse-propensity means ``(mu1(c), mu0(c))`` over the given rows.

    ``row_weights`` (censoring weights) multiply the inverse-propensity weights.
    """
    y = np.asarray(y, float)
    r = np.asarray(r, float)
    lw = 1.0 if row_weights is None else np.asarray(row_weights, float)
    m1 = mu1 + lw * r / pi1 * (y - mu1)
    m0 = mu0 + lw * (1 - r) / (1 - pi1) * (y - mu0)
    return float(np.mean(m1)), float(np.mean(m0))


def estimate_subgroup(
    ds: ObservationalDataset,
    mask,
    config: ValidationConfig = ValidationConfig(),
    *,
    c: float = float("nan"),
    outcome=None,
    row_weights=None,
    fit_outcome: Callable | None = None,
    propensity: Callable | None = None,
) -> SubgroupAdEstimate:
    """Doubly robust effect ratio inside the rows selected by ``mask``.

    The propensity (logistic) and per-arm outcome models are fitted on the
    subgroup only. ``fit_outcome(z, y, w)`` overrides the configured outcome
    learner and ``propensity(z)`` replaces the fitted propensity.
    """
    idx = np.flatnonzero(np.asarray(mask, bool))
    m = idx.size
    z, r = ds.z[idx], ds.r[idx]
    y = (ds.y if outcome is None else np.asarray(outcome, float))[idx]
    lw = None if row_weights is None else np.asarray(row_weights, float)[idx]
    n1 = int(r.sum())
    n0 = m - n1
    if m < config.min_subgroup_size:
        raise SubgroupError(f"subgroup has {m} rows, fewer than {config.min_subgroup_size}")
    if min(n0, n1) < config.min_per_arm:
        raise SubgroupError(f"subgroup has {n1} treated and {n0} control rows; need {config.min_per_arm} of each")

    if propensity is not None:
        pi1 = np.clip(propensity(z), config.clip_eps, 1 - config.clip_eps)
    else:
        pi1 = fit_logistic(z, r, clip_eps=config.clip_eps).predict(z)
    fit = fit_outcome or outcome_fitter(config.nuisance())
    mus = []
    for arm in (0, 1):
        rows = r == arm
        model = fit(z[rows], y[rows], None if lw is None else lw[rows])
        mus.append(model.predict(z))
    m1, m0 = augmented_means(y, r, mus[0], mus[1], pi1, lw)
    if m0 <= 0:
        raise NonPositiveMeanError(f"augmented control mean is {m0:.4g} at threshold {c:.4g}")
    return SubgroupAdEstimate(float(c), m, n1, n0, m1, m0)


def estimate_ad(ds: ObservationalDataset, scores, c: float, config: ValidationConfig = ValidationConfig(), **kw) -> SubgroupAdEstimate:
    """``AD_hat(c)`` on the subgroup ``{score >= c}``."""
    scores = np.asarray(scores, float)
    if scores.shape != (ds.n,):
        raise ValueError("need one score per row")
    return estimate_subgroup(ds, scores >= c, config, c=c, **kw)


@dataclass(frozen=True)
class CurvePoint:
    q: float
    c: float
    estimate: SubgroupAdEstimate | None
    reason: str = ""

    @property
    def ad(self) -> float:
        return self.estimate.ad if self.estimate is not None else float("nan")


@dataclass(frozen=True)
class ValidationCurve:
    points: tuple
    score_name: str = "score"
    metric: str = "rate_ratio"

    @property
    def q(self) -> np.ndarray:
        return np.array([p.q for p in self.points])

    @property
    def ad(self) -> np.ndarray:
        return np.array([p.ad for p in self.points])

    def records(self) -> list[dict]:
        out = []
        for p in self.points:
            e = p.estimate
            out.append(
                {
                    "q": p.q,
                    "threshold": p.c,
                    "m_c": e.m_c if e else None,
                    "mu1": e.mu1_hat if e else None,
                    "mu0": e.mu0_hat if e else None,
                    "ad": e.ad if e else None,
                    "status": "ok" if e else p.reason,
                }
            )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["q", "threshold", "m_c", "mu1", "mu0", "ad"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for rec in self.records():
            w.writerow(["" if rec[k] is None else repr(rec[k]) for k in cols])
        return buf.getvalue()

    def to_json(self) -> str:
        recs = self.records()
        for rec in recs:
            if rec["threshold"] == WHOLE_POPULATION:
                rec["threshold"] = None
        return json.dumps({"score": self.score_name, "metric": self.metric, "points": recs}, indent=2)

    def gnuplot_table(self) -> str:
        lines = [f"# {self.score_name} {self.metric}", "# q ad m_c"]
        for rec in self.records():
            ad = "NaN" if rec["ad"] is None else f"{rec['ad']:.6g}"
            lines.append(f"{rec['q']:.4g} {ad} {rec['m_c'] or 0}")
        return "\n".join(lines) + "\n"

    def sparkline(self) -> str:
        return sparkline(self.ad)


_BARS = "▁▂▃▄▅▆▇█"


def sparkline(values) -> str:
    v = np.asarray(values, float)
    ok = np.isfinite(v)
    if not ok.any():
        return "·" * v.size
    lo, hi = v[ok].min(), v[ok].max()
    span = hi - lo
    out = []
    for x in v:
        if not np.isfinite(x):
            out.append("·")
        elif span == 0:
            out.append(_BARS[3])
        else:
            out.append(_BARS[int(round((x - lo) / span * (len(_BARS) - 1)))])
    return "".join(out)


def validation_curve(
    ds: ObservationalDataset,
    scores,
    q_grid=DEFAULT_Q_GRID,
    config: ValidationConfig = ValidationConfig(),
    *,
    score_name: str = "score",
    metric: str = "rate_ratio",
    **kw,
) -> ValidationCurve:
    """One ``estimate_ad`` per grid value; failing points are kept as absent."""
    q_grid = [float(q) for q in q_grid]
    if any(not 0 < q <= 1 for q in q_grid) or any(b <= a for a, b in zip(q_grid, q_grid[1:])):
        raise ValueError("q_grid must be strictly increasing inside (0, 1]")
    pts = []
    for q in q_grid:
        c = quantile_threshold(scores, q)
        try:
            pts.append(CurvePoint(q, c, estimate_ad(ds, scores, c, config, **kw)))
        except (SubgroupError, NonPositiveMeanError) as exc:
            pts.append(CurvePoint(q, c, None, str(exc)))
    return ValidationCurve(tuple(pts), score_name, metric)


@dataclass(frozen=True)
class MedianSplit:
    threshold: float
    high: SubgroupAdEstimate
    low: SubgroupAdEstimate

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "high": self.high.to_dict(), "low": self.low.to_dict()}


def median_split(ds: ObservationalDataset, scores, config: ValidationConfig = ValidationConfig(), **kw) -> MedianSplit:
    """Effect ratios in the upper and lower halves of the score distribution."""
    scores = np.asarray(scores, float)
    c = quantile_threshold(scores, 0.5)
    high = scores >= c
    if high.all():
        # constant score: split by rank so both halves are populated
        order = np.argsort(scores, kind="stable")
        high = np.zeros(ds.n, bool)
        high[order[ds.n // 2 :]] = True
    return MedianSplit(
        c,
        estimate_subgroup(ds, high, config, c=c, **kw),
        estimate_subgroup(ds, ~high, config, c=-math.inf, **kw),
    )


# population oracles


def population_ad(prob, mu0, mu1, scores, c: float) -> float:
    """Exact ``AD(c)`` for a finite covariate law with probabilities ``prob``."""
    sel = np.asarray(scores, float) >= c
    if not sel.any():
        return float("nan")
    p = np.asarray(prob, float)[sel]
    return float(np.dot(p, np.asarray(mu1, float)[sel]) / np.dot(p, np.asarray(mu0, float)[sel]))


@dataclass(frozen=True, eq=False)
class DiscreteLaw:
    """A finite covariate support with point probabilities and exact arm means."""

    prob: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        return self.mu1 / self.mu0


@dataclass(frozen=True)
class MonotoneAdReport:
    c_grid: tuple
    ad: tuple
    monotone: bool
    ad_at_least_c: bool
    max_decrease: float
    max_shortfall: float

    @property
    def holds(self) -> bool:
        return self.monotone and self.ad_at_least_c


def check_monotone_ad(law: DiscreteLaw, c_grid=None, tol: float = 1e-10) -> MonotoneAdReport:
    """Rank by the true ratio and verify ``AD`` is non-decreasing and ``AD(c) >= c``.

    The default grid is every distinct ratio value, which covers every
    distinct subgroup. Grid points with an empty subgroup are skipped.
    """
    D = law.ratio
    grid = np.unique(D) if c_grid is None else np.sort(np.asarray(c_grid, float))
    ads = np.array([population_ad(law.prob, law.mu0, law.mu1, D, c) for c in grid])
    ok = np.isfinite(ads)
    g, a = grid[ok], ads[ok]
    dec = float(np.max(a[:-1] - a[1:], initial=0.0))
    short = float(np.max(g - a, initial=0.0))
    return MonotoneAdReport(tuple(grid.tolist()), tuple(ads.tolist()), dec <= tol, short <= tol, dec, short)


def random_discrete_law(rng: np.random.Generator, k: int = 10) -> DiscreteLaw:
    """A random log-linear law over ``k`` support points (for property checks)."""
    prob = rng.dirichlet(np.ones(k))
    z = rng.normal(size=(k, 3))
    mu0 = np.exp(rng.normal() + z @ rng.normal(size=3))
    mu1 = mu0 * np.exp(rng.normal() + z @ rng.normal(size=3))
    return DiscreteLaw(prob, mu0, mu1)


# odds-ratio counterexample


def _odds(p):
    return p / (1 - p)


@dataclass(frozen=True)
class OddsRatioExample:
    p0: np.ndarray = field(repr=False)
    p1: np.ndarray = field(repr=False)
    conditional_or: np.ndarray = field(repr=False)
    top_marginal_or: float
    top_min_conditional_or: float
    best_subset: tuple
    best_marginal_or: float


def marginal_or(p0, p1, idx) -> float:
    return float(_odds(np.mean(p1[idx])) / _odds(np.mean(p0[idx])))


def odds_ratio_counterexample(n: int = 100, size: int = 10, directions: int = 20001) -> OddsRatioExample:
    """Binary-outcome population where ranking by conditional OR misses the largest marginal OR.

    Control response rates alternate between ``i/(n+1)`` (odd ``i``) and
    ``1 - i/(n+1)`` (even ``i``); conditional ORs decay log-linearly from 2
    to 1/2. The best ``size``-subset is searched over the vertices of the
    set of subset means (a sweep of linear directions) followed by
    single-swap hill climbing.
    """
    i = np.arange(1, n + 1)
    p0 = np.where(i % 2 == 0, 1 - i / (n + 1), i / (n + 1))
    theta = np.exp(np.log(2) - np.log(4) * (i - 1) / (n - 1))
    p1 = p0 * theta / (1 - p0 + p0 * theta)
    top = np.argsort(-theta, kind="stable")[:size]

    best, best_idx = -np.inf, None
    for ang in np.linspace(0, 2 * np.pi, directions):
        idx = np.argpartition(-(np.cos(ang) * p1 + np.sin(ang) * p0), size - 1)[:size]
        v = marginal_or(p0, p1, idx)
        if v > best:
            best, best_idx = v, idx
    chosen = set(best_idx.tolist())
    improved = True
    while improved:
        improved = False
        for a in sorted(chosen):
            for b in range(n):
                if b in chosen:
                    continue
                cand = (chosen - {a}) | {b}
                v = marginal_or(p0, p1, np.fromiter(cand, int))
                if v > best + 1e-15:
                    best, chosen, improved = v, cand, True
                    break
            if improved:
                break
    return OddsRatioExample(
        p0,
        p1,
        theta,
        marginal_or(p0, p1, top),
        float(theta[top].min()),
        tuple(sorted(int(j) + 1 for j in chosen)),
        float(best),
    )
