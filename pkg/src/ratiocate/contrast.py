"""Doubly robust contrast regression for the log-linear rate ratio ``D(z) = exp(delta'(1, z))``.

The estimating function for one unit with outcome ``y``, treatment ``r``,
baseline-mean nuisance ``mu0`` and propensity ``pi`` is::

    m = z~ * [(1-pi) r y - pi (1-r) y e^f - mu0 e^f (r - pi)] / (e^f pi + 1 - pi),
    f = delta' z~.

The symmetric variant averages this equation with its mirror image built
on ``mu1``; it is the default because it treats the two arms alike.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DEFAULT_FOLDS, ObservationalDataset, add_intercept, make_folds
from .nuisance import NuisanceBundle, NuisanceConfig, fit_nuisance_bundle
from .glm import ConvergenceError

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
MAX_HALVINGS = 20


class SingularDerivativeError(np.linalg.LinAlgError):
    def __init__(self, message, condition: float):
        super().__init__(message)
        self.condition = condition


@dataclass(frozen=True)
class ContrastConfig:
    symmetric: bool = True
    folds: int = DEFAULT_FOLDS
    replicates: int = 1
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    init_delta: tuple | None = None
    # "optimal" divides by e^f pi + 1 - pi; "unit" drops that weight
    weighting: str = "optimal"

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("need at least two folds")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.weighting not in ("optimal", "unit"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


@dataclass(frozen=True, eq=False)
class ContrastFit:
    delta: np.ndarray
    covariance: np.ndarray
    solver_report: dict
    partition_replicates: int = 1
    covariate_names: tuple = ()
    symmetric: bool = True
    replicate_deltas: tuple = field(default=(), repr=False)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def z_values(self) -> np.ndarray:
        return self.delta / self.std_errors

    def predict_log_cate(self, z) -> np.ndarray:
        X = add_intercept(z)
        if X.shape[1] != self.delta.size:
            raise ValueError(f"expected {self.delta.size - 1} covariates, got {X.shape[1] - 1}")
        return X @ self.delta

    def predict_cate(self, z) -> np.ndarray:
        return np.exp(self.predict_log_cate(z))

    def confidence_intervals(self, level_z: float = 1.959963984540054) -> np.ndarray:
        se = self.std_errors
        return np.column_stack([self.delta - level_z * se, self.delta + level_z * se])

    def to_dict(self) -> dict:
        names = ("intercept",) + tuple(self.covariate_names)
        return {
            "method": "contrast",
            "symmetric": self.symmetric,
            "terms": list(names),
            "delta": self.delta.tolist(),
            "covariance": self.covariance.tolist(),
            "std_errors": self.std_errors.tolist(),
            "z_values": self.z_values.tolist(),
            "partition_replicates": self.partition_replicates,
            "solver_report": self.solver_report,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "ContrastFit":
        return cls(
            np.asarray(doc["delta"], float),
            np.asarray(doc["covariance"], float),
            doc.get("solver_report", {}),
            doc.get("partition_replicates", 1),
            tuple(doc["terms"][1:]),
            doc.get("symmetric", True),
        )


def predict_cate(fit: ContrastFit, z) -> np.ndarray:
    return fit.predict_cate(z)


def _row_terms(f, y, r, mu0, mu1, pi, symmetric, weighting):
    """Scalar part ``g`` of each row's estimating function and ``dg/df``."""
    e = np.exp(f)
    if symmetric:
        half = 0.5 * (e * mu0 + mu1)
        a = r * (y - half) * (1 - pi) - (1 - r) * (y * e - half) * pi
        da = -r * (0.5 * e * mu0) * (1 - pi) - (1 - r) * (y * e - 0.5 * e * mu0) * pi
    else:
        a = (1 - pi) * r * y - pi * (1 - r) * y * e - mu0 * e * (r - pi)
        da = -pi * (1 - r) * y * e - mu0 * e * (r - pi)
    if weighting == "unit":
        return a, da
    den = e * pi + 1 - pi
    g = a / den
    dg = (da * den - a * e * pi) / (den * den)
    return g, dg


def estimating_function(y, r, z_tilde, delta, mu0, pi1) -> np.ndarray:
    """The estimating function ``m`` for a single observation (asymmetric form)."""
    if not 0 < pi1 < 1:
        raise ValueError("pi1 must lie in (0, 1)")
    z_tilde = np.asarray(z_tilde, float)
    f = float(z_tilde @ np.asarray(delta, float))
    g, _ = _row_terms(f, float(y), float(r), float(mu0), 0.0, float(pi1), False, "optimal")
    return z_tilde * g


@dataclass(frozen=True, eq=False)
class _Problem:
    X: np.ndarray
    y: np.ndarray
    r: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    pi1: np.ndarray
    w: np.ndarray
    symmetric: bool
    weighting: str

    def terms(self, delta):
        return _row_terms(self.X @ delta, self.y, self.r, self.mu0, self.mu1, self.pi1, self.symmetric, self.weighting)

    def score(self, delta) -> np.ndarray:
        g, _ = self.terms(delta)
        return self.X.T @ (self.w * g) / self.X.shape[0]

    def jacobian(self, delta) -> np.ndarray:
        _, dg = self.terms(delta)
        return (self.X * (self.w * dg)[:, None]).T @ self.X / self.X.shape[0]

    def scores_per_row(self, delta) -> np.ndarray:
        g, _ = self.terms(delta)
        return self.X * (self.w * g)[:, None]


def _problem(ds, bundle, symmetric, weighting="optimal", outcome=None, row_weights=None) -> _Problem:
    y = ds.y if outcome is None else np.asarray(outcome, float)
    w = np.ones(ds.n) if row_weights is None else np.asarray(row_weights, float)
    return _Problem(ds.design, y, ds.r.astype(float), bundle.mu0, bundle.mu1, bundle.pi1, w, symmetric, weighting)


def _solve(problem: _Problem, init, tol, max_iter) -> tuple[np.ndarray, dict]:
    """Damped Newton on the estimating equation."""
    delta = np.zeros(problem.X.shape[1]) if init is None else np.asarray(init, float).copy()
    S = problem.score(delta)
    norm = np.max(np.abs(S))
    it = 0
    while norm > tol and it < max_iter:
        it += 1
        J = problem.jacobian(delta)
        cond = np.linalg.cond(J)
        if not np.isfinite(cond) or cond > 1e14:
            raise SingularDerivativeError(f"derivative matrix is singular at iteration {it} (condition {cond:.3g})", cond)
        step = -np.linalg.solve(J, S)
        for _ in range(MAX_HALVINGS + 1):
            cand = delta + step
            S_new = problem.score(cand)
            new_norm = np.max(np.abs(S_new))
            if np.all(np.isfinite(S_new)) and new_norm < norm:
                break
            step = 0.5 * step
        else:
            raise ConvergenceError(
                f"step halving exhausted at iteration {it} (score norm {norm:.3g})",
                {"iterations": it, "final_score_norm": float(norm), "converged": False, "delta": delta.tolist()},
            )
        delta, S, norm = cand, S_new, new_norm
    report = {"iterations": it, "final_score_norm": float(norm), "converged": bool(norm <= tol)}
    if norm > tol:
        raise ConvergenceError(f"Newton did not converge in {max_iter} iterations (score norm {norm:.3g})", report)
    return delta, report


def _sandwich(problem: _Problem, delta) -> np.ndarray:
    n = problem.X.shape[0]
    A = -problem.jacobian(delta)
    M = problem.scores_per_row(delta)
    B = M.T @ M / n
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularDerivativeError(f"derivative matrix is singular (condition {cond:.3g})", cond)
    Ainv = np.linalg.inv(A)
    cov = Ainv @ B @ Ainv.T / n
    return 0.5 * (cov + cov.T)


def sandwich_covariance(
    ds: ObservationalDataset,
    bundle: NuisanceBundle,
    delta_hat,
    *,
    symmetric: bool = False,
    outcome=None,
    row_weights=None,
) -> np.ndarray:
    """``n^-1 A^-1 B A^-1`` at ``delta_hat`` with cross-fitted nuisances.

    ``A`` is minus the derivative of the cross-fitted estimating equation and
    ``B`` the mean outer product of the per-row estimating functions. For the
    asymmetric equation ``A`` reduces to
    ``n^-1 sum z~ z~' w(delta) {y + mu0 (r - pi1) / pi1}`` with
    ``w = e^f pi1 pi0 / (e^f pi1 + pi0)^2``.
    """
    problem = _problem(ds, bundle, symmetric, outcome=outcome, row_weights=row_weights)
    return _sandwich(problem, np.asarray(delta_hat, float))


def solve_contrast(
    ds: ObservationalDataset,
    bundle: NuisanceBundle,
    config: ContrastConfig = ContrastConfig(),
    *,
    outcome=None,
    row_weights=None,
) -> ContrastFit:
    """Root of the cross-fitted estimating equation for one fold partition.

    ``outcome`` overrides ``ds.y``; ``row_weights`` multiply every row's
    estimating function (inverse-probability-of-censoring weights in the
    survival pipeline).
    """
    if bundle.fold_plan.n != ds.n:
        raise ValueError("nuisance bundle does not match the dataset")
    problem = _problem(ds, bundle, config.symmetric, config.weighting, outcome, row_weights)
    delta, report = _solve(problem, config.init_delta, config.tol, config.max_iter)
    cov = _sandwich(problem, delta)
    return ContrastFit(delta, cov, report, 1, ds.covariate_names, config.symmetric, (delta,))


def fit_contrast(
    ds: ObservationalDataset,
    config: ContrastConfig = ContrastConfig(),
    nuisance: NuisanceConfig = NuisanceConfig(),
    seed: int = 0,
    bundles: list | None = None,
) -> ContrastFit:
    """Contrast regression averaged over ``config.replicates`` random partitions.

    The reported covariance is that of the first partition.
    """
    from .rng import child_seed

    fits = []
    for rep in range(config.replicates):
        if bundles is not None and rep < len(bundles):
            bundle = bundles[rep]
        else:
            plan = make_folds(ds.n, config.folds, ds.r, child_seed(seed, "folds", rep))
            bundle = fit_nuisance_bundle(ds, plan, replace(nuisance, seed=child_seed(seed, "nuisance", rep)))
        fits.append(solve_contrast(ds, bundle, config))
    first = fits[0]
    deltas = tuple(f.delta for f in fits)
    return replace(
        first,
        delta=np.mean(deltas, axis=0),
        partition_replicates=len(fits),
        replicate_deltas=deltas,
    )


# population-level oracles on a finite covariate support


@dataclass(frozen=True, eq=False)
class DiscreteInstance:
    """Finite covariate law with exact nuisance functions.

    ``z`` holds the support points (k x d), ``prob`` their probabilities.
    """

    z: np.ndarray
    prob: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    pi1: np.ndarray

    @property
    def design(self):
        return add_intercept(self.z)

    @classmethod
    def from_contrast(cls, z, prob, mu0, pi1, delta0):
        z = np.asarray(z, float)
        if z.ndim == 1:
            z = z[:, None]
        mu0 = np.asarray(mu0, float)
        mu1 = mu0 * np.exp(add_intercept(z) @ np.asarray(delta0, float))
        return cls(z, np.asarray(prob, float), mu0, mu1, np.asarray(pi1, float))


def expected_estimating_function(inst: DiscreteInstance, delta, mu=None, pi=None, symmetric=False, mu1_nuis=None):
    """``E m(G; delta, mu, pi)`` computed exactly over the support.

    Outcome randomness enters only through ``E(Y | Z, R=r) = mu_r(Z)``.
    ``mu``/``pi`` default to the true ``mu0``/``pi1``.
    """
    mu = inst.mu0 if mu is None else np.asarray(mu, float)
    pi = inst.pi1 if pi is None else np.asarray(pi, float)
    X = inst.design
    e = np.exp(X @ np.asarray(delta, float))
    p1 = inst.pi1
    if symmetric:
        m1 = inst.mu1 if mu1_nuis is None else np.asarray(mu1_nuis, float)
        half = 0.5 * (e * mu + m1)
        a = p1 * (inst.mu1 - half) * (1 - pi) - (1 - p1) * (inst.mu0 * e - half) * pi
    else:
        a = (1 - pi) * p1 * inst.mu1 - pi * (1 - p1) * inst.mu0 * e - mu * e * (p1 - pi)
    den = e * pi + 1 - pi
    return X.T @ (inst.prob * a / den)


def population_root(inst: DiscreteInstance, mu=None, pi=None, symmetric=False, tol=1e-13, max_iter=200):
    """Solve ``E m = 0`` over the support by Newton with a finite-difference Jacobian."""
    p = inst.design.shape[1]
    delta = np.zeros(p)
    for _ in range(max_iter):
        S = expected_estimating_function(inst, delta, mu, pi, symmetric)
        if np.max(np.abs(S)) < tol:
            return delta
        J = np.empty((p, p))
        h = 1e-6
        for j in range(p):
            e = np.zeros(p)
            e[j] = h
            J[:, j] = (
                expected_estimating_function(inst, delta + e, mu, pi, symmetric)
                - expected_estimating_function(inst, delta - e, mu, pi, symmetric)
            ) / (2 * h)
        delta = delta - np.linalg.solve(J, S)
    raise ConvergenceError("population root search did not converge")


def orthogonality_check(inst: DiscreteInstance, delta0, d_mu, d_pi, r: float = 0.0, h: float = 1e-4) -> float:
    """Central finite difference of ``t -> E m(G; delta0, mu0 + t d_mu, pi1 + t d_pi)`` at ``t = r``.

    Returns the largest absolute component of the derivative vector.
    """
    d_mu = np.broadcast_to(np.asarray(d_mu, float), inst.mu0.shape)
    d_pi = np.broadcast_to(np.asarray(d_pi, float), inst.pi1.shape)
    for t in (r - h, r + h):
        pi = inst.pi1 + t * d_pi
        if np.any(pi <= 0) or np.any(pi >= 1):
            raise ValueError(f"perturbed propensity leaves (0, 1) at t={t:g}")

    def g(t):
        return expected_estimating_function(inst, delta0, inst.mu0 + t * d_mu, inst.pi1 + t * d_pi)

    return float(np.max(np.abs((g(r + h) - g(r - h)) / (2 * h))))
