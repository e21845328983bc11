"""Ratio of restricted mean time lost (RMTL) as the CATE for censored event times.

The outcome is ``tau - T ^ tau``. Censoring is handled by inverse
probability of censoring weights ``L = I(T ^ tau < C) / K_C(T ^ tau)``, with
``K_C`` a per-arm Kaplan-Meier estimate of the censoring survival function
and ``I(T ^ tau < C) = status + (1 - status) I(X >= tau)``. With these
weights the count-outcome machinery (contrast regression, two-regression
calibration, validation curves) applies unchanged.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .contrast import ContrastConfig, ContrastFit, solve_contrast
from .data import DEFAULT_FOLDS, FoldPlan, ObservationalDataset, add_intercept
from .glm import DEFAULT_CLIP_MU, DEFAULT_MAX_ITER, DEFAULT_TOL, ConvergenceError
from .nuisance import NuisanceBundle, NuisanceConfig, crossfit, outcome_fitter, propensity_fitter, shared_tree_count
from .tworeg import TwoRegressionConfig, TwoRegressionFit, fit_naive, fit_two_regression
from .validate import (
    DEFAULT_Q_GRID,
    CurvePoint,
    NonPositiveMeanError,
    SubgroupError,
    ValidationConfig,
    ValidationCurve,
    estimate_subgroup,
    quantile_threshold,
)

FLOOR_EPS = 0.05
ETA_CAP = 20.0


class BoundaryWarning(UserWarning):
    """A working-model coefficient hit its cap."""


class FloorWarning(UserWarning):
    """Censoring survival estimates were floored."""


@dataclass(frozen=True, eq=False)
class KaplanMeier:
    """Right-continuous step function ``K(t) = prod_{s <= t} (1 - d_s / n_s)``."""

    times: np.ndarray
    surv: np.ndarray
    floor_eps: float = FLOOR_EPS

    def __call__(self, t) -> np.ndarray:
        return self.evaluate(t)[0]

    def evaluate(self, t) -> tuple[np.ndarray, int]:
        """Floored values at ``t`` and how many of them needed the floor."""
        t = np.asarray(t, float)
        k = np.searchsorted(self.times, t, side="right")
        raw = np.concatenate([[1.0], self.surv])[k]
        low = raw < self.floor_eps
        return np.where(low, self.floor_eps, raw), int(low.sum())


def kaplan_meier(time, event, floor_eps: float = FLOOR_EPS) -> KaplanMeier:
    """Kaplan-Meier for the survival function of the times flagged by ``event``."""
    time = np.asarray(time, float)
    event = np.asarray(event, float)
    if time.size == 0:
        raise ValueError("no observations")
    uniq, inv = np.unique(time, return_inverse=True)
    d = np.bincount(inv, weights=event, minlength=uniq.size)
    total = np.bincount(inv, minlength=uniq.size)
    at_risk = time.size - np.concatenate([[0], np.cumsum(total)[:-1]])
    has = d > 0
    factors = 1.0 - d[has] / at_risk[has]
    return KaplanMeier(uniq[has], np.cumprod(factors), floor_eps)


@dataclass(frozen=True, eq=False)
class CensoringModel:
    arm0: KaplanMeier
    arm1: KaplanMeier
    floor_eps: float = FLOOR_EPS

    def survival(self, t, r) -> np.ndarray:
        t = np.asarray(t, float)
        r = np.asarray(r)
        return np.where(r == 1, self.arm1(t), self.arm0(t))


def fit_censoring_km(ds: ObservationalDataset, arm: int, floor_eps: float = FLOOR_EPS) -> KaplanMeier:
    """Kaplan-Meier of the censoring time within ``arm`` (censorings are the events)."""
    _require_survival(ds)
    rows = ds.r == arm
    if not rows.any():
        raise ValueError(f"arm {arm} has no observations")
    return kaplan_meier(ds.time[rows], 1.0 - ds.status[rows], floor_eps)


def fit_censoring(ds: ObservationalDataset, floor_eps: float = FLOOR_EPS) -> CensoringModel:
    return CensoringModel(fit_censoring_km(ds, 0, floor_eps), fit_censoring_km(ds, 1, floor_eps), floor_eps)


def _require_survival(ds):
    if ds.time is None or ds.status is None:
        raise ValueError("dataset has no survival fields")


def ipcw_weight(x, status, km: KaplanMeier, tau: float, counter: list | None = None) -> np.ndarray:
    """``[status + (1 - status) I(x >= tau)] / K(x ^ tau)``.

    ``counter``, if given, receives the number of floored evaluations.
    """
    x = np.asarray(x, float)
    status = np.asarray(status, float)
    num = status + (1 - status) * (x >= tau)
    k, floored = km.evaluate(np.minimum(x, tau))
    if counter is not None:
        counter.append(floored)
    return num / k


def ipcw_weights(ds: ObservationalDataset, tau: float, censoring: CensoringModel | None = None, floor_eps=FLOOR_EPS):
    """Per-row censoring weights using each row's own-arm Kaplan-Meier."""
    _require_survival(ds)
    cm = censoring or fit_censoring(ds, floor_eps)
    out = np.empty(ds.n)
    floored = []
    for arm, km in ((0, cm.arm0), (1, cm.arm1)):
        rows = ds.r == arm
        out[rows] = ipcw_weight(ds.time[rows], ds.status[rows], km, tau, floored)
    if sum(floored):
        warnings.warn(f"{sum(floored)} censoring survival values floored at {cm.floor_eps}", FloorWarning, stacklevel=2)
    return out


def crossfit_ipcw_weights(ds: ObservationalDataset, plan: FoldPlan, tau: float, floor_eps=FLOOR_EPS):
    """Weights for fold ``k`` rows from Kaplan-Meier curves fitted on its complement.

    Returns ``(weights, censoring_models)`` with one censoring model per fold.
    """
    out = np.empty(ds.n)
    models = []
    for k in range(plan.k):
        cm = fit_censoring(ds.subset(plan.complement(k)), floor_eps)
        models.append(cm)
        test = plan.fold(k)
        sub = ds.subset(test)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FloorWarning)
            out[test] = ipcw_weights(sub, tau, cm)
    return out, models


def rmtl_outcome(ds: ObservationalDataset, tau: float) -> np.ndarray:
    """``tau - X ^ tau``; only meaningful on rows with positive censoring weight."""
    _require_survival(ds)
    return tau - np.minimum(ds.time, tau)


def check_tau(ds: ObservationalDataset, tau: float, floor_eps: float = FLOOR_EPS):
    if not tau > 0:
        raise ValueError("tau must be positive")
    if tau > ds.time.max():
        raise ValueError(f"tau={tau} exceeds the largest observed time {ds.time.max():.4g}")


# restricted-mean working model


@dataclass(frozen=True, eq=False)
class RmstModel:
    """``E(T ^ tau | z) = tau expit(eta'(1, z))``; ``predict`` returns the mean time lost."""

    eta: np.ndarray
    tau: float
    capped: bool = False
    iterations: int = 0
    clip_mu: float = DEFAULT_CLIP_MU

    def predict_rmst(self, z) -> np.ndarray:
        return self.tau * expit(add_intercept(z) @ self.eta)

    def predict(self, z) -> np.ndarray:
        lost = self.tau * expit(-(add_intercept(z) @ self.eta))
        return np.clip(lost, self.clip_mu, None)

    def to_dict(self) -> dict:
        return {"kind": "rmst", "eta": self.eta.tolist(), "tau": self.tau, "capped": self.capped, "clip_mu": self.clip_mu}

    @classmethod
    def from_dict(cls, doc: dict) -> "RmstModel":
        return cls(np.asarray(doc["eta"], float), doc["tau"], doc.get("capped", False), 0, doc.get("clip_mu", DEFAULT_CLIP_MU))


def fit_rmst_regression(
    z,
    t_tau,
    weights,
    tau: float,
    *,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    cap: float = ETA_CAP,
    clip_mu: float = DEFAULT_CLIP_MU,
) -> RmstModel:
    """Root of ``sum_i L_i (1, z_i) {t_i - tau expit(eta'(1, z_i))} = 0``.

    ``t_tau`` holds ``T ^ tau`` (any value where the weight is zero). This is
    a weighted logistic score with fractional response ``t / tau``, solved by
    damped Newton; coefficients are kept inside ``[-cap, cap]`` and a
    :class:`BoundaryWarning` is raised when the cap binds.
    """
    X = add_intercept(z)
    w = np.asarray(weights, float)
    keep = w > 0
    if not keep.any():
        raise ValueError("no rows with positive censoring weight")
    X, w = X[keep], w[keep]
    y = np.clip(np.asarray(t_tau, float)[keep] / tau, 0.0, 1.0)
    wsum = w.sum()
    if np.all(y == y[0]) and y[0] in (0.0, 1.0):
        # the root sits at infinity; pin the intercept at the cap
        beta = np.zeros(X.shape[1])
        beta[0] = cap if y[0] == 1.0 else -cap
        warnings.warn(f"restricted-mean coefficients reached the cap |eta| = {cap}", BoundaryWarning, stacklevel=2)
        return RmstModel(beta, tau, True, 0, clip_mu)

    def objective(b):
        eta = X @ b
        return float(np.sum(w * (np.logaddexp(0, eta) - y * eta)) / wsum)

    beta = np.zeros(X.shape[1])
    obj = objective(beta)
    capped = False
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        score = X.T @ (w * (y - p)) / wsum
        # with coordinates pinned at the cap only the free ones must be stationary
        free = ~((np.abs(beta) >= cap) & (np.sign(score) == np.sign(beta)))
        if np.max(np.abs(score[free]), initial=0.0) <= tol:
            break
        H = (X * (w * p * (1 - p))[:, None]).T @ X / wsum
        H = H + 1e-12 * np.eye(H.shape[0])
        step = np.linalg.solve(H, score)
        for _ in range(40):
            cand = np.clip(beta + step, -cap, cap)
            new = objective(cand)
            if new <= obj + 1e-15 * abs(obj):
                break
            step *= 0.5
        moved = np.max(np.abs(cand - beta))
        beta, obj = cand, new
        if moved < tol * 1e-2:
            break
    else:
        raise ConvergenceError(f"restricted-mean regression did not converge in {max_iter} iterations")
    if np.any(np.abs(beta) >= cap):
        capped = True
        warnings.warn(f"restricted-mean coefficients reached the cap |eta| = {cap}", BoundaryWarning, stacklevel=2)
    return RmstModel(beta, tau, capped, it, clip_mu)


def rmst_fitter(tau: float, clip_mu: float = DEFAULT_CLIP_MU):
    """Adapter ``fit(z, lost, w)`` taking the time-lost outcome ``tau - T ^ tau``."""

    def fit(z, lost, w=None):
        w = np.ones(len(lost)) if w is None else w
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryWarning)
            return fit_rmst_regression(z, tau - np.asarray(lost, float), w, tau, clip_mu=clip_mu)

    return fit


# cross-fitted survival nuisances


@dataclass(frozen=True)
class SurvivalConfig:
    tau: float = 0.75
    floor_eps: float = FLOOR_EPS
    # "boosted" (IPCW Poisson boosting) or "rmst" (restricted-mean working model)
    outcome_learner: str = "boosted"
    folds: int = DEFAULT_FOLDS
    nuisance: NuisanceConfig = field(default_factory=lambda: NuisanceConfig(outcome_learner="boosted"))

    def __post_init__(self):
        if self.outcome_learner not in ("rmst", "boosted"):
            raise ValueError(f"unknown survival outcome learner {self.outcome_learner!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True, eq=False)
class SurvivalNuisance:
    bundle: NuisanceBundle
    weights: np.ndarray
    outcome: np.ndarray
    censoring: tuple


def fit_survival_nuisance(ds: ObservationalDataset, plan: FoldPlan, config: SurvivalConfig = SurvivalConfig()) -> SurvivalNuisance:
    """Cross-fitted propensity, time-lost means and censoring weights.

    For fold ``k`` the censoring curves, the outcome models and the
    propensity are all fitted on the complement of fold ``k``.
    """
    _require_survival(ds)
    check_tau(ds, config.tau)
    tau = config.tau
    lost = rmtl_outcome(ds, tau)
    z, r = ds.z, ds.r
    weights, cms = crossfit_ipcw_weights(ds, plan, tau, config.floor_eps)
    # training weights: fold-specific curves evaluated on the complement rows
    train_w = {}
    for k in range(plan.k):
        idx = plan.complement(k)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FloorWarning)
            train_w[k] = ipcw_weights(ds.subset(idx), tau, cms[k])

    if config.outcome_learner == "rmst":
        fitters = {0: rmst_fitter(tau, config.nuisance.clip_mu), 1: rmst_fitter(tau, config.nuisance.clip_mu)}
    else:
        full_w = ipcw_weights_quiet(ds, tau, config.floor_eps)
        fitters = {}
        tree_counts = {}
        for arm in (0, 1):
            rows = np.flatnonzero((r == arm) & (full_w > 0))
            tree_counts[arm] = shared_tree_count(z[rows], lost[rows], full_w[rows], config.nuisance)
            fitters[arm] = outcome_fitter(config.nuisance, tree_counts[arm])

    comp_pos = {}
    for k in range(plan.k):
        comp = plan.complement(k)
        pos = np.full(ds.n, -1)
        pos[comp] = np.arange(comp.size)
        comp_pos[k] = pos

    def fit_mu(idx, arm, k):
        w = train_w[k][comp_pos[k][idx]]
        keep = w > 0
        return fitters[arm](z[idx][keep], lost[idx][keep], w[keep])

    fit_pi = propensity_fitter(config.nuisance)
    bundle = crossfit(z, r, plan, fit_mu, lambda idx: fit_pi(z[idx], r[idx]), config.nuisance.clip_eps, config.nuisance.clip_mu)
    bundle.meta["outcome_learner"] = config.outcome_learner
    if config.outcome_learner == "boosted":
        bundle.meta["n_trees"] = tree_counts
    return SurvivalNuisance(bundle, weights, lost, tuple(cms))


def ipcw_weights_quiet(ds, tau, floor_eps=FLOOR_EPS):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FloorWarning)
        return ipcw_weights(ds, tau, floor_eps=floor_eps)


def solve_rmtl_contrast(
    ds: ObservationalDataset,
    nuis: SurvivalNuisance,
    config: ContrastConfig = ContrastConfig(),
) -> ContrastFit:
    """Censoring-weighted contrast regression on the time-lost outcome."""
    return solve_contrast(ds, nuis.bundle, config, outcome=nuis.outcome, row_weights=nuis.weights)


def fit_rmtl_two_regression(ds, nuis: SurvivalNuisance, config: TwoRegressionConfig = TwoRegressionConfig()) -> TwoRegressionFit:
    return fit_two_regression(ds, nuis.bundle, config, outcome=nuis.outcome, row_weights=nuis.weights)


def fit_rmtl_naive(ds: ObservationalDataset, tau: float, floor_eps: float = FLOOR_EPS) -> TwoRegressionFit:
    """Per-arm censoring-weighted log-linear fit of the time lost."""
    w = ipcw_weights_quiet(ds, tau, floor_eps)
    return fit_naive(ds, outcome=rmtl_outcome(ds, tau), row_weights=w)


def fit_rmtl_boosting(
    ds: ObservationalDataset,
    tau: float,
    nuisance: NuisanceConfig = NuisanceConfig(),
    floor_eps: float = FLOOR_EPS,
    n_trees: dict | None = None,
):
    """Per-arm censoring-weighted Poisson boosting of the time lost; returns ``(model0, model1)``.

    ``n_trees`` maps arm to a fixed tree count (skipping cross-validation).
    """
    w = ipcw_weights_quiet(ds, tau, floor_eps)
    lost = rmtl_outcome(ds, tau)
    models = []
    for arm in (0, 1):
        fit = outcome_fitter(replace(nuisance, outcome_learner="boosted"), (n_trees or {}).get(arm))
        rows = (ds.r == arm) & (w > 0)
        models.append(fit(ds.z[rows], lost[rows], w[rows]))
    return tuple(models)


def rmtl_validation_curve(
    ds: ObservationalDataset,
    scores,
    tau: float,
    q_grid=DEFAULT_Q_GRID,
    config: ValidationConfig = ValidationConfig(),
    *,
    floor_eps: float = FLOOR_EPS,
    score_name: str = "score",
    fit_outcome=None,
) -> ValidationCurve:
    """Validation curve of the time-lost ratio.

    Censoring curves and the restricted-mean working models are refitted
    inside each subgroup, like the propensity model.
    """
    _require_survival(ds)
    scores = np.asarray(scores, float)
    lost = rmtl_outcome(ds, tau)
    fit = fit_outcome or rmst_fitter(tau, config.clip_mu)
    pts = []
    for q in q_grid:
        c = quantile_threshold(scores, q)
        mask = scores >= c
        try:
            w = np.zeros(ds.n)
            sub = ds.subset(np.flatnonzero(mask))
            if min(sub.r.sum(), sub.n - sub.r.sum()) == 0:
                raise SubgroupError("subgroup lacks one arm")
            w[mask] = ipcw_weights_quiet(sub, tau, floor_eps)
            est = estimate_subgroup(ds, mask, config, c=c, outcome=lost, row_weights=w, fit_outcome=fit)
            pts.append(CurvePoint(q, c, est))
        except (SubgroupError, NonPositiveMeanError) as exc:
            pts.append(CurvePoint(q, c, None, str(exc)))
    return ValidationCurve(tuple(pts), score_name, "rmtl_ratio")


# spurious hazard-ratio heterogeneity


def cox_slope(z, t, event=None, tol: float = 1e-10, max_iter: int = 100) -> float:
    """Partial-likelihood estimate for one scalar covariate (Breslow, no ties expected)."""
    z = np.asarray(z, float)
    t = np.asarray(t, float)
    ev = np.ones_like(t) if event is None else np.asarray(event, float)
    order = np.argsort(-t, kind="stable")
    z, ev = z[order], ev[order]
    b = 0.0
    for _ in range(max_iter):
        w = np.exp(b * z - np.max(b * z))
        s0 = np.cumsum(w)
        s1 = np.cumsum(w * z)
        s2 = np.cumsum(w * z * z)
        m = s1 / s0
        U = np.sum(ev * (z - m))
        info = np.sum(ev * (s2 / s0 - m * m))
        step = U / info
        b += step
        if abs(step) < tol:
            return float(b)
    raise ConvergenceError("Cox partial-likelihood Newton did not converge")


def _piecewise_exp(rng, z, scale):
    # hazard scale * (1/z on [0,1), 1/z^2 on [1,2), 1/z^3 after), by inversion
    h = (scale / z, scale / z**2, scale / z**3)
    e = rng.exponential(1.0, z.size)
    return np.where(
        e < h[0],
        e / h[0],
        np.where(e < h[0] + h[1], 1 + (e - h[0]) / h[1], 2 + (e - h[0] - h[1]) / h[2]),
    )


def check_spurious_hr(n: int = 100_000, seed: int = 0, baseline_scale: float = 1.0) -> dict:
    """Per-arm Cox slopes when the hazard ratio is the constant 1/2.

    Control hazard ``baseline_scale * (Z^-1 I(t<1) + Z^-2 I(1<=t<2) + Z^-3 I(t>=2))``
    with ``Z ~ U(0, 2)``, treated hazard half of it, no censoring. Although
    the true ratio does not depend on ``Z`` the two slopes differ.
    """
    from .rng import stream

    rng = stream(seed, "spurious_hr")
    out = {}
    for arm, factor in ((1, 0.5), (0, 1.0)):
        z = rng.uniform(0.0, 2.0, n)
        z = np.where(z > 0, z, np.finfo(float).tiny)
        t = _piecewise_exp(rng, z, baseline_scale * factor)
        out[f"beta{arm}"] = cox_slope(z, t)
    out["difference"] = out["beta1"] - out["beta0"]
    out["baseline_scale"] = baseline_scale
    return out
