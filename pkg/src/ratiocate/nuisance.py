"""Cross-fitted nuisance models: outcome means per arm and the propensity score."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import boosting
from .boosting import BoostedPoissonModel, fit_boosted_poisson, select_n_trees
from .data import FoldPlan, ObservationalDataset
from .glm import (
    DEFAULT_CLIP_EPS,
    DEFAULT_CLIP_MU,
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    PoissonGlmModel,
    PropensityModel,
    fit_logistic,
    fit_poisson_glm,
)


@dataclass(frozen=True)
class NuisanceConfig:
    """Learner choices for the nuisance models.

    ``shared_tree_count`` picks the boosting tree count once per arm by
    cross-validation on all of that arm's rows and reuses it for every fold
    model; otherwise each fold model runs its own cross-validation.
    """

    outcome_learner: str = "boosted"
    clip_eps: float = DEFAULT_CLIP_EPS
    clip_mu: float = DEFAULT_CLIP_MU
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    n_trees: int | None = None
    learning_rate: float = boosting.DEFAULT_LEARNING_RATE
    tree_grid: tuple = boosting.DEFAULT_TREE_GRID
    cv_folds: int = boosting.DEFAULT_CV_FOLDS
    shared_tree_count: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.outcome_learner not in ("glm", "boosted"):
            raise ValueError(f"unknown outcome learner {self.outcome_learner!r}")


class ConstantPropensity:
    """Propensity model returning the same probability everywhere."""

    def __init__(self, p: float = 0.5):
        self.p = p

    def predict(self, z):
        return np.full(np.asarray(z).shape[0], self.p)

    def to_dict(self):
        return {"kind": "constant", "p": self.p}


OutcomeFitter = Callable[[np.ndarray, np.ndarray, np.ndarray | None], object]


def outcome_fitter(config: NuisanceConfig, n_trees: int | None = None) -> OutcomeFitter:
    """Return ``fit(z, y, weights) -> model`` for the configured outcome learner."""
    if config.outcome_learner == "glm":
        return lambda z, y, w=None: fit_poisson_glm(z, y, w, tol=config.tol, max_iter=config.max_iter, clip_mu=config.clip_mu)
    trees = config.n_trees if n_trees is None else n_trees
    return lambda z, y, w=None: fit_boosted_poisson(
        z,
        y,
        w,
        n_trees=trees,
        learning_rate=config.learning_rate,
        tree_grid=config.tree_grid,
        cv_folds=config.cv_folds,
        seed=config.seed,
        clip_mu=config.clip_mu,
    )


def propensity_fitter(config: NuisanceConfig):
    return lambda z, r: fit_logistic(z, r, tol=config.tol, max_iter=config.max_iter, clip_eps=config.clip_eps)


def shared_tree_count(z, y, weights, config: NuisanceConfig) -> int:
    if config.n_trees is not None:
        return config.n_trees
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    n, _ = select_n_trees(
        np.asarray(z, float), np.asarray(y, float), w, config.learning_rate, config.tree_grid, config.cv_folds, boosting.MIN_LEAF, config.seed
    )
    return n


@dataclass(frozen=True, eq=False)
class NuisanceBundle:
    """Per-fold nuisance models and their cross-fitted predictions.

    ``mu0_models[k]``, ``mu1_models[k]`` and ``pi1_models[k]`` were trained
    without the rows of fold ``k``; row ``i``'s cross-fitted prediction comes
    from the models of ``fold_plan.assignment[i]``.
    """

    fold_plan: FoldPlan
    mu0_models: tuple
    mu1_models: tuple
    pi1_models: tuple
    mu0: np.ndarray
    mu1: np.ndarray
    pi1: np.ndarray
    meta: dict = field(default_factory=dict)

    def predict(self, z, fold: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.mu0_models[fold].predict(z), self.mu1_models[fold].predict(z), self.pi1_models[fold].predict(z)

    def to_dict(self) -> dict:
        return {
            "k": self.fold_plan.k,
            "assignment": self.fold_plan.assignment.tolist(),
            "seed": self.fold_plan.seed,
            "mu0_models": [m.to_dict() for m in self.mu0_models],
            "mu1_models": [m.to_dict() for m in self.mu1_models],
            "pi1_models": [m.to_dict() for m in self.pi1_models],
        }


def model_from_dict(doc: dict):
    kind = doc["kind"]
    if kind == "logistic":
        return PropensityModel.from_dict(doc)
    if kind == "poisson_glm":
        return PoissonGlmModel.from_dict(doc)
    if kind == "boosted_poisson":
        return BoostedPoissonModel.from_dict(doc)
    if kind == "constant":
        return ConstantPropensity(doc["p"])
    if kind == "rmst":
        from .survival import RmstModel

        return RmstModel.from_dict(doc)
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def crossfit(
    z: np.ndarray,
    r: np.ndarray,
    plan: FoldPlan,
    fit_mu: Callable[[np.ndarray, int, int], object],
    fit_pi: Callable[[np.ndarray], object],
    clip_eps: float = DEFAULT_CLIP_EPS,
    clip_mu: float = DEFAULT_CLIP_MU,
) -> NuisanceBundle:
    """Generic leave-fold-out driver.

    ``fit_mu(train_idx, arm, k)`` and ``fit_pi(train_idx)`` receive the row
    indices outside held-out fold ``k`` and return fitted models.
    """
    n = z.shape[0]
    if plan.n != n:
        raise ValueError("fold plan does not match the dataset")
    mu0 = np.empty(n)
    mu1 = np.empty(n)
    pi1 = np.empty(n)
    models = ([], [], [])
    for k in range(plan.k):
        train = plan.complement(k)
        test = plan.fold(k)
        rt = r[train]
        if rt.min() == rt.max():
            raise ValueError(f"the complement of fold {k} lacks one arm")
        m0 = fit_mu(train[rt == 0], 0, k)
        m1 = fit_mu(train[rt == 1], 1, k)
        p1 = fit_pi(train)
        for store, m in zip(models, (m0, m1, p1)):
            store.append(m)
        mu0[test] = m0.predict(z[test])
        mu1[test] = m1.predict(z[test])
        pi1[test] = p1.predict(z[test])
    mu0 = np.clip(mu0, clip_mu, 1.0 / clip_mu)
    mu1 = np.clip(mu1, clip_mu, 1.0 / clip_mu)
    pi1 = np.clip(pi1, clip_eps, 1.0 - clip_eps)
    return NuisanceBundle(plan, tuple(models[0]), tuple(models[1]), tuple(models[2]), mu0, mu1, pi1)


def fit_nuisance_bundle(
    ds: ObservationalDataset,
    plan: FoldPlan,
    config: NuisanceConfig = NuisanceConfig(),
    *,
    outcome: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    fit_outcome: OutcomeFitter | None = None,
    fit_propensity=None,
) -> NuisanceBundle:
    """Cross-fit ``mu0``, ``mu1`` on each arm and ``pi1`` on all rows outside each fold.

    ``outcome``/``weights`` override ``ds.y`` and unit weights (used by the
    survival pipeline). ``fit_outcome(z, y, w)`` and ``fit_propensity(z, r)``
    replace the configured learners.
    """
    y = ds.y if outcome is None else np.asarray(outcome, float)
    if y is None:
        raise ValueError("no outcome available for the outcome models")
    z, r = ds.z, ds.r
    w = None if weights is None else np.asarray(weights, float)
    fit_pi = fit_propensity or propensity_fitter(config)

    fitters = {}
    tree_counts = {}
    for arm in (0, 1):
        if fit_outcome is not None:
            fitters[arm] = fit_outcome
        elif config.outcome_learner == "boosted" and config.shared_tree_count:
            rows = np.flatnonzero(r == arm)
            nt = shared_tree_count(z[rows], y[rows], None if w is None else w[rows], config)
            tree_counts[arm] = nt
            fitters[arm] = outcome_fitter(config, nt)
        else:
            fitters[arm] = outcome_fitter(config)

    def fit_mu(idx, arm, k):
        return fitters[arm](z[idx], y[idx], None if w is None else w[idx])

    bundle = crossfit(z, r, plan, fit_mu, lambda idx: fit_pi(z[idx], r[idx]), config.clip_eps, config.clip_mu)
    bundle.meta["outcome_learner"] = "custom" if fit_outcome is not None else config.outcome_learner
    if tree_counts:
        bundle.meta["n_trees"] = tree_counts
    return bundle
