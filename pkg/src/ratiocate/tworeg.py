"""Calibrated two-regression estimator and the naive per-arm Poisson baseline.

Each arm's flexible prediction ``mu_hat_r`` is calibrated by an
inverse-propensity-weighted Poisson fit over the design
``(log mu_hat_r(z), 1, z)``; the calibrated ``mu_tilde_r`` is then projected
onto ``exp(beta_r'(1, z))`` over the whole sample. The CATE score is
``exp((beta_1 - beta_0)'(1, z))``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import ObservationalDataset, add_intercept
from .glm import DEFAULT_MAX_ITER, DEFAULT_TOL, fit_poisson_glm, irls_poisson
from .nuisance import NuisanceBundle

# weighted Gram matrices above this (column-scaled) condition number are
# treated as collinear
COLLINEARITY_COND = 1e8


class CollinearityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TwoRegressionConfig:
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    collinearity_cond: float = COLLINEARITY_COND


@dataclass(frozen=True, eq=False)
class ArmCalibration:
    """Calibration of one arm: ``mu_tilde = exp(alpha log mu_hat + gamma'(1, z))``.

    ``dropped`` records that ``log mu_hat`` was collinear with the linear
    term and was removed (``alpha`` is then 0).
    """

    arm: int
    alpha: float
    gamma: np.ndarray
    dropped: bool = False
    source: str = ""
    iterations: int = 0

    def apply(self, mu_hat, z) -> np.ndarray:
        return np.exp(self.alpha * np.log(mu_hat) + add_intercept(z) @ self.gamma)

    def to_dict(self) -> dict:
        return {
            "arm": self.arm,
            "alpha": self.alpha,
            "gamma": self.gamma.tolist(),
            "dropped_log_mu": self.dropped,
            "source": self.source,
        }


@dataclass(frozen=True, eq=False)
class CalibrationFit:
    arm0: ArmCalibration
    arm1: ArmCalibration

    def __getitem__(self, arm: int) -> ArmCalibration:
        return (self.arm0, self.arm1)[arm]

    def to_dict(self) -> dict:
        return {"arm0": self.arm0.to_dict(), "arm1": self.arm1.to_dict()}


@dataclass(frozen=True, eq=False)
class TwoRegressionFit:
    beta0: np.ndarray
    beta1: np.ndarray
    calibration: CalibrationFit | None = None
    covariate_names: tuple = ()
    method: str = "tworeg"
    meta: dict = field(default_factory=dict)

    @property
    def delta_implied(self) -> np.ndarray:
        return self.beta1 - self.beta0

    def predict_log_cate(self, z) -> np.ndarray:
        X = add_intercept(z)
        if X.shape[1] != self.beta0.size:
            raise ValueError(f"expected {self.beta0.size - 1} covariates, got {X.shape[1] - 1}")
        return X @ self.delta_implied

    def predict_cate(self, z) -> np.ndarray:
        return np.exp(self.predict_log_cate(z))

    def to_dict(self) -> dict:
        doc = {
            "method": self.method,
            "terms": ["intercept", *self.covariate_names],
            "beta0": self.beta0.tolist(),
            "beta1": self.beta1.tolist(),
            "log_cate_weights": self.delta_implied.tolist(),
        }
        if self.calibration is not None:
            doc["calibration"] = self.calibration.to_dict()
        doc.update(self.meta)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "TwoRegressionFit":
        return cls(
            np.asarray(doc["beta0"], float),
            np.asarray(doc["beta1"], float),
            None,
            tuple(doc["terms"][1:]),
            doc.get("method", "tworeg"),
        )


def ipw_weights(r, pi1, arm: int) -> np.ndarray:
    """``W_i(arm) = R_i / pi1`` for arm 1 and ``(1 - R_i) / (1 - pi1)`` for arm 0."""
    r = np.asarray(r, float)
    pi1 = np.asarray(pi1, float)
    return r / pi1 if arm == 1 else (1 - r) / (1 - pi1)


def _scaled_condition(X, w) -> float:
    G = (X * w[:, None]).T @ X / w.sum()
    s = np.sqrt(np.diag(G))
    if np.any(s == 0):
        return np.inf
    return float(np.linalg.cond(G / np.outer(s, s)))


def calibrate_arm(
    z,
    y,
    r,
    mu_hat,
    pi1,
    arm: int,
    config: TwoRegressionConfig = TwoRegressionConfig(),
    row_weights=None,
    source: str = "",
) -> ArmCalibration:
    """Solve the weighted calibration equation for one arm.

    Rows outside ``arm`` carry zero weight, so summing over all rows is the
    same as summing over the arm.
    """
    w = ipw_weights(r, pi1, arm)
    if row_weights is not None:
        w = w * np.asarray(row_weights, float)
    Xz = add_intercept(z)
    log_mu = np.log(np.asarray(mu_hat, float))
    X = np.column_stack([log_mu, Xz])
    keep = w > 0
    if _scaled_condition(X[keep], w[keep]) > config.collinearity_cond:
        warnings.warn(
            f"log mu_hat is collinear with the covariates in arm {arm}; dropping it",
            CollinearityWarning,
            stacklevel=2,
        )
        gamma, it = irls_poisson(Xz[keep], y[keep], w[keep], tol=config.tol, max_iter=config.max_iter)
        return ArmCalibration(arm, 0.0, gamma, True, source, it)
    init = np.zeros(X.shape[1])
    init[0] = 1.0
    coef, it = irls_poisson(X[keep], y[keep], w[keep], tol=config.tol, max_iter=config.max_iter, init=init)
    return ArmCalibration(arm, float(coef[0]), coef[1:], False, source, it)


def calibrate(
    ds: ObservationalDataset,
    bundle: NuisanceBundle,
    arm: int,
    config: TwoRegressionConfig = TwoRegressionConfig(),
    *,
    outcome=None,
    row_weights=None,
) -> ArmCalibration:
    """Calibrate the cross-fitted ``mu_hat_arm`` with cross-fitted propensities."""
    y = ds.y if outcome is None else np.asarray(outcome, float)
    mu_hat = bundle.mu1 if arm == 1 else bundle.mu0
    return calibrate_arm(
        ds.z, y, ds.r, mu_hat, bundle.pi1, arm, config, row_weights, bundle.meta.get("outcome_learner", "")
    )


def project(z, mu_tilde, config: TwoRegressionConfig = TwoRegressionConfig()) -> np.ndarray:
    """Unweighted Poisson-score projection of ``mu_tilde`` onto ``exp(b'(1, z))``."""
    mu_tilde = np.asarray(mu_tilde, float)
    if np.any(mu_tilde <= 0) or not np.all(np.isfinite(mu_tilde)):
        raise ValueError("calibrated predictions must be positive and finite")
    beta, _ = irls_poisson(add_intercept(z), mu_tilde, tol=config.tol, max_iter=config.max_iter)
    return beta


def fit_two_regression(
    ds: ObservationalDataset,
    bundle: NuisanceBundle,
    config: TwoRegressionConfig = TwoRegressionConfig(),
    *,
    outcome=None,
    row_weights=None,
) -> TwoRegressionFit:
    """Calibrate then project each arm using the bundle's cross-fitted predictions.

    ``row_weights`` (e.g. censoring weights) multiply the calibration weights.
    """
    if bundle.fold_plan.n != ds.n:
        raise ValueError("nuisance bundle does not match the dataset")
    cals = []
    betas = []
    for arm in (0, 1):
        cal = calibrate(ds, bundle, arm, config, outcome=outcome, row_weights=row_weights)
        mu_hat = bundle.mu1 if arm == 1 else bundle.mu0
        cals.append(cal)
        betas.append(project(ds.z, cal.apply(mu_hat, ds.z), config))
    return TwoRegressionFit(betas[0], betas[1], CalibrationFit(*cals), ds.covariate_names, "tworeg")


def fit_naive(
    ds: ObservationalDataset,
    *,
    outcome=None,
    row_weights=None,
    config: TwoRegressionConfig = TwoRegressionConfig(),
) -> TwoRegressionFit:
    """Per-arm Poisson working model fitted to the observed rows, no adjustment."""
    y = ds.y if outcome is None else np.asarray(outcome, float)
    betas = []
    for arm in (0, 1):
        rows = np.flatnonzero(ds.r == arm)
        if rows.size == 0:
            raise ValueError(f"arm {arm} is empty")
        w = None if row_weights is None else np.asarray(row_weights, float)[rows]
        betas.append(fit_poisson_glm(ds.z[rows], y[rows], w, tol=config.tol, max_iter=config.max_iter).coefficients)
    return TwoRegressionFit(betas[0], betas[1], None, ds.covariate_names, "naive")
