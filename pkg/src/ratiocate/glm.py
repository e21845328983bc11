"""IRLS solvers for the logistic propensity model and the Poisson working model."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, xlogy

from .data import add_intercept

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
DEFAULT_CLIP_EPS = 0.01
DEFAULT_CLIP_MU = 1e-3
# linear predictors are kept inside this range during the search
_ETA_MAX = 30.0


class ConvergenceError(RuntimeError):
    """A solver stopped without meeting its tolerance.

    ``report`` carries the diagnostic state (iterations, final score norm,
    last coefficients).
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


class SeparationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PropensityModel:
    coefficients: np.ndarray
    clip_eps: float = DEFAULT_CLIP_EPS
    converged: bool = True
    iterations: int = 0
    ridge: float = 0.0

    def predict(self, z) -> np.ndarray:
        p = expit(add_intercept(z) @ self.coefficients)
        return np.clip(p, self.clip_eps, 1.0 - self.clip_eps)

    def to_dict(self) -> dict:
        return {
            "kind": "logistic",
            "coefficients": self.coefficients.tolist(),
            "clip_eps": self.clip_eps,
            "ridge": self.ridge,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PropensityModel":
        return cls(np.asarray(doc["coefficients"], float), doc["clip_eps"], ridge=doc.get("ridge", 0.0))


@dataclass(frozen=True)
class PoissonGlmModel:
    coefficients: np.ndarray
    converged: bool = True
    iterations: int = 0
    clip_mu: float = DEFAULT_CLIP_MU

    def predict(self, z) -> np.ndarray:
        lo, hi = np.log(self.clip_mu), -np.log(self.clip_mu)
        return np.exp(np.clip(self.predict_log(z), lo, hi))

    def predict_log(self, z) -> np.ndarray:
        return add_intercept(z) @ self.coefficients

    def to_dict(self) -> dict:
        return {"kind": "poisson_glm", "coefficients": self.coefficients.tolist(), "clip_mu": self.clip_mu}

    @classmethod
    def from_dict(cls, doc: dict) -> "PoissonGlmModel":
        return cls(np.asarray(doc["coefficients"], float), clip_mu=doc.get("clip_mu", DEFAULT_CLIP_MU))


def poisson_deviance(y, mu, weights=None) -> float:
    y = np.asarray(y, float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, float)
    return float(2.0 * np.sum(w * (xlogy(y, y) - xlogy(y, mu) - (y - mu))))


def _check_weights(weights, n):
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, float)
    if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be a finite nonnegative vector of length n")
    return w


def irls_poisson(
    X: np.ndarray,
    y: np.ndarray,
    weights=None,
    *,
    offset=None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    init=None,
):
    """Root of ``sum_i w_i x_i (y_i - exp(x_i'b + offset_i)) = 0`` by Newton/IRLS.

    Works on an arbitrary design ``X`` (no intercept is added). The score is
    normalized by ``sum(w)``; convergence means its max-norm is below ``tol``.
    Returns ``(coef, iterations)``.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n, p = X.shape
    w = _check_weights(weights, n)
    if np.any(y < 0):
        raise ValueError("Poisson outcome must be nonnegative")
    if not np.sum(w * y) > 0:
        raise ValueError("all outcomes with positive weight are zero")
    off = np.zeros(n) if offset is None else np.asarray(offset, float)
    wsum = w.sum()

    if init is None:
        beta = np.zeros(p)
        # start from the weighted mean when there is an intercept-like column
        const = np.flatnonzero(np.all(X == X[:1], axis=0) & (X[0] != 0))
        if const.size:
            j = const[0]
            beta[j] = np.log(np.sum(w * y) / np.sum(w * np.exp(off))) / X[0, j]
    else:
        beta = np.asarray(init, float).copy()

    def objective(b):
        eta = np.clip(X @ b + off, -_ETA_MAX, _ETA_MAX)
        mu = np.exp(eta)
        return np.sum(w * (mu - y * eta)) / wsum, mu

    obj, mu = objective(beta)
    for it in range(1, max_iter + 1):
        score = X.T @ (w * (y - mu)) / wsum
        norm = np.max(np.abs(score))
        if norm <= tol:
            return beta, it - 1
        hess = (X * (w * mu)[:, None]).T @ X / wsum
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, score, rcond=None)[0]
        for _ in range(30):
            new_obj, new_mu = objective(beta + step)
            if new_obj <= obj + 1e-15 * abs(obj):
                break
            step *= 0.5
        beta = beta + step
        obj, mu = new_obj, new_mu
    score = X.T @ (w * (y - mu)) / wsum
    norm = float(np.max(np.abs(score)))
    if norm <= tol:
        return beta, max_iter
    raise ConvergenceError(
        f"Poisson IRLS did not converge in {max_iter} iterations (score norm {norm:.3g})",
        {"iterations": max_iter, "score_norm": norm, "coefficients": beta.tolist()},
    )


def fit_poisson_glm(
    z,
    y,
    weights=None,
    *,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    clip_mu: float = DEFAULT_CLIP_MU,
) -> PoissonGlmModel:
    """Log-linear Poisson working model ``E(y|z) = exp(b'(1, z))``."""
    beta, it = irls_poisson(add_intercept(z), y, weights, tol=tol, max_iter=max_iter)
    return PoissonGlmModel(beta, converged=True, iterations=it, clip_mu=clip_mu)


def _logistic_newton(X, r, ridge, tol, max_iter, penalize):
    n, p = X.shape
    beta = np.zeros(p)
    pen = ridge * penalize / n

    def objective(b):
        eta = X @ b
        # mean negative log-likelihood plus ridge
        return (np.sum(np.logaddexp(0.0, eta) - r * eta) + 0.5 * ridge * np.sum(penalize * b * b)) / n

    obj = objective(beta)
    diverging = False
    for it in range(1, max_iter + 1):
        prob = expit(X @ beta)
        score = X.T @ (r - prob) / n - pen * beta
        if np.max(np.abs(score)) <= tol:
            return beta, it - 1, True, False
        hess = (X * (prob * (1 - prob))[:, None]).T @ X / n + np.diag(pen)
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, score, rcond=None)[0]
        for _ in range(30):
            new_obj = objective(beta + step)
            if new_obj <= obj + 1e-15 * abs(obj):
                break
            step *= 0.5
        beta = beta + step
        obj = new_obj
        if np.max(np.abs(beta)) > _ETA_MAX:
            diverging = True
            break
    return beta, it, False, diverging


def fit_logistic(
    z,
    r,
    *,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    clip_eps: float = DEFAULT_CLIP_EPS,
) -> PropensityModel:
    """Logistic regression of ``r`` on ``(1, z)`` by Newton-Raphson.

    If the coefficients run off to infinity (complete or quasi-complete
    separation) the fit is redone with a ridge penalty ``1e-4 * n`` on the
    non-intercept coefficients and a :class:`SeparationWarning` is issued.
    """
    X = add_intercept(z)
    r = np.asarray(r, float)
    n, p = X.shape
    if r.min() == r.max():
        raise ValueError("logistic regression needs both classes")
    penalize = np.ones(p)
    penalize[0] = 0.0
    beta, it, ok, diverging = _logistic_newton(X, r, 0.0, tol, max_iter, penalize)
    if ok:
        return PropensityModel(beta, clip_eps, True, it)
    if not diverging:
        prob = expit(X @ beta)
        fitted_extreme = np.min(prob * (1 - prob)) < 1e-10
        if not fitted_extreme:
            raise ConvergenceError(
                f"logistic IRLS did not converge in {max_iter} iterations",
                {"iterations": it, "coefficients": beta.tolist()},
            )
    ridge = 1e-4 * n
    warnings.warn(f"separation detected; refitting with ridge penalty {ridge:g}", SeparationWarning, stacklevel=2)
    beta, it, ok, _ = _logistic_newton(X, r, ridge, tol, max_iter, penalize)
    if not ok:
        raise ConvergenceError("ridge-penalized logistic fit did not converge", {"iterations": it})
    return PropensityModel(beta, clip_eps, True, it, ridge=ridge)
