"""Data-generating processes of the simulation study and their exact truths."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, ndtri
from scipy.stats import qmc

from ..data import ObservationalDataset
from ..rng import stream

D = 10
CLIP = 2.0
EXPOSURE_MAX = 0.75
TAU = 0.75


def _equicorrelated_chol(k: int, rho: float) -> np.ndarray:
    c = np.full((k, k), rho)
    np.fill_diagonal(c, 1.0)
    return np.linalg.cholesky(c)


_CHOL = _equicorrelated_chol(5, 0.5)


def covariates_from_normals(u: np.ndarray) -> np.ndarray:
    """Map iid standard normals (n x 10) to the study's covariate law.

    Components 1-5 are independent, 6-10 equicorrelated with correlation 0.5,
    and every entry is clipped to [-2, 2].
    """
    z = np.array(u, dtype=float, copy=True)
    z[:, 5:] = u[:, 5:] @ _CHOL.T
    return np.clip(z, -CLIP, CLIP)


def draw_covariates(rng: np.random.Generator, n: int) -> np.ndarray:
    return covariates_from_normals(rng.standard_normal((n, D)))


def quasi_covariates(n: int, seed: int = 0) -> np.ndarray:
    """Scrambled-Sobol draws from the covariate law (for population oracles)."""
    sob = qmc.Sobol(d=D, scramble=True, seed=seed)
    m = int(np.ceil(np.log2(max(n, 2))))
    u = sob.random_base2(m)[:n]
    u = np.clip(u, 1e-12, 1 - 1e-12)
    return covariates_from_normals(ndtri(u))


def _count_pi(z):
    return expit(-(z[:, 0] + 0.5 * z[:, 1] - 0.5 * z[:, 5]))


def _surv_pi(z):
    return expit(-(-z[:, 0] + 0.5 * z[:, 1] + 0.5 * z[:, 5]))


def _delta(*pairs):
    v = np.zeros(D + 1)
    for j, c in pairs:
        v[j] = c
    return v


def rmtl_exponential(rate, tau=TAU):
    """``E(tau - T ^ tau)`` for ``T ~ Exp(rate)``."""
    rate = np.asarray(rate, float)
    return tau - (-np.expm1(-rate * tau)) / rate


@dataclass(frozen=True)
class DgpSpec:
    """A simulation setting.

    For count settings ``mu0``/``mu1`` are the rate functions; for survival
    settings ``hazard0``/``hazard1`` are exponential event rates and
    ``mu0``/``mu1`` return the restricted mean time lost up to ``tau``.
    """

    name: str
    kind: str
    pi1: Callable
    mu0: Callable
    mu1: Callable
    delta0: np.ndarray | None = None
    hazard0: Callable | None = None
    hazard1: Callable | None = None
    tau: float = TAU
    description: str = ""

    def true_cate(self, z) -> np.ndarray:
        return self.mu1(z) / self.mu0(z)

    def true_log_cate(self, z) -> np.ndarray:
        return np.log(self.mu1(z)) - np.log(self.mu0(z))


def _a(z, j):
    return np.abs(z[:, j])


SETTINGS: dict[str, DgpSpec] = {}


def _register(spec: DgpSpec):
    SETTINGS[spec.name] = spec


_register(
    DgpSpec(
        "setting1_contrast",
        "count",
        _count_pi,
        mu0=lambda z: np.exp(0.95 + 1.5 * (_a(z, 0) - _a(z, 5))),
        mu1=lambda z: np.exp(0.85 + 0.25 * (z[:, 0] + z[:, 5]) + 1.5 * (_a(z, 0) - _a(z, 5))),
        delta0=_delta((0, -0.1), (1, 0.25), (6, 0.25)),
        description="well-specified contrast, misspecified Poisson",
    )
)
_register(
    DgpSpec(
        "setting2_poisson",
        "count",
        _count_pi,
        mu0=lambda z: np.exp(0.55 + 0.25 * z[:, 1] + 0.50 * z[:, 5]),
        mu1=lambda z: np.exp(0.925 + 0.125 * z[:, 0] + 0.30 * z[:, 1] + 0.25 * z[:, 5]),
        delta0=_delta((0, 0.375), (1, 0.125), (2, 0.05), (6, -0.25)),
        description="well-specified Poisson",
    )
)
_register(
    DgpSpec(
        "setting3_mild",
        "count",
        _count_pi,
        mu0=lambda z: np.exp(-0.25 + 0.25 * np.abs(z[:, 1] + 0.5) + 0.50 * z[:, 5] + 0.5 * (_a(z, 0) + _a(z, 5))),
        mu1=lambda z: np.exp(
            0.50 + 0.125 * z[:, 0] + 0.30 * np.abs(z[:, 1] + 0.5) + 0.25 * z[:, 5] + 0.5 * (_a(z, 0) + _a(z, 5))
        ),
        description="mild contrast misspecification",
    )
)
_register(
    DgpSpec(
        "setting4_large",
        "count",
        _count_pi,
        mu0=lambda z: np.exp(
            0.320
            + 0.125 * np.abs(z[:, 0] + z[:, 5] + 1)
            + 0.3 * np.abs(z[:, 1] + 0.5)
            + 0.125 * z[:, 5]
            + 0.5 * (_a(z, 0) + _a(z, 5))
        ),
        mu1=lambda z: np.exp(
            1.235
            - 0.125 * np.abs(z[:, 0] + z[:, 5] + 1)
            - 0.3 * np.abs(z[:, 1] + 0.5)
            - 0.125 * z[:, 5]
            + 0.5 * (_a(z, 0) + _a(z, 5))
        ),
        description="large contrast misspecification",
    )
)


def _surv(name, h0, h1, description):
    _register(
        DgpSpec(
            name,
            "survival",
            _surv_pi,
            mu0=lambda z: rmtl_exponential(h0(z)),
            mu1=lambda z: rmtl_exponential(h1(z)),
            hazard0=h0,
            hazard1=h1,
            description=description,
        )
    )


_surv(
    "surv1",
    lambda z: np.exp(-0.375 + 0.25 * z[:, 1] + 0.25 * z[:, 5] - 0.5 * _a(z, 0) + 0.5 * _a(z, 1)),
    lambda z: np.exp(-0.350 + 0.125 * z[:, 0] + 0.3 * z[:, 1] + 0.5 * z[:, 5] - 0.5 * _a(z, 0) + 0.5 * _a(z, 1)),
    "survival setting 1",
)
_surv(
    "surv2",
    lambda z: np.exp(-0.075 + 0.25 * z[:, 1] + 0.25 * z[:, 5]),
    lambda z: np.exp(-0.050 + 0.125 * z[:, 0] + 0.3 * z[:, 1] + 0.5 * z[:, 5]),
    "survival setting 2",
)

# univariate confounding example: Y ~ Pois(z^2) in both arms, Z | R=r ~ N(r - 1/2, 1)
_register(
    DgpSpec(
        "toy_confounding",
        "toy",
        pi1=lambda z: expit(z[:, 0]),
        mu0=lambda z: z[:, 0] ** 2,
        mu1=lambda z: z[:, 0] ** 2,
        delta0=np.zeros(2),
        description="confounded toy example with constant CATE",
    )
)


def get_setting(name: str) -> DgpSpec:
    try:
        return SETTINGS[name]
    except KeyError:
        raise KeyError(f"unknown setting {name!r}; valid names: {', '.join(SETTINGS)}") from None


@dataclass(frozen=True, eq=False)
class Simulated:
    """A generated dataset plus the hidden truth for each row."""

    dataset: ObservationalDataset
    true_cate: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    pi1: np.ndarray
    extra: dict = field(default_factory=dict)


def generate(spec: DgpSpec | str, n: int, seed: int = 0, *, randomized: bool = False) -> Simulated:
    """Draw ``n`` units from ``spec``; deterministic given ``seed``.

    ``randomized=True`` replaces the propensity by 1/2 (and, for the toy
    example, draws Z ~ N(0, 1) in both arms).
    """
    if isinstance(spec, str):
        spec = get_setting(spec)
    if n < 1:
        raise ValueError("n must be positive")
    rng = stream(seed, "dgp:" + spec.name)

    if spec.kind == "toy":
        r = (rng.random(n) < 0.5).astype(float)
        shift = 0.0 if randomized else 1.0
        z = (rng.standard_normal(n) + shift * (r - 0.5))[:, None]
        mu = spec.mu0(z)
        y = rng.poisson(mu).astype(float)
        pi = np.full(n, 0.5) if randomized else spec.pi1(z)
        ds = ObservationalDataset(z=z, r=r, y=y)
        return Simulated(ds, np.ones(n), mu, mu, pi)

    z = draw_covariates(rng, n)
    pi = np.full(n, 0.5) if randomized else spec.pi1(z)
    r = (rng.random(n) < pi).astype(float)
    mu0, mu1 = spec.mu0(z), spec.mu1(z)
    if spec.kind == "count":
        f = rng.uniform(0.0, EXPOSURE_MAX, n)
        # U[0, 0.75) can return exactly 0; exposure must be positive
        f = np.where(f > 0, f, EXPOSURE_MAX * np.finfo(float).eps)
        y = rng.poisson(np.where(r == 1, mu1, mu0) * f).astype(float)
        ds = ObservationalDataset(z=z, r=r, y=y, exposure=f)
        return Simulated(ds, mu1 / mu0, mu0, mu1, pi)

    rate = np.where(r == 1, spec.hazard1(z), spec.hazard0(z))
    t = rng.exponential(1.0 / rate)
    c = np.minimum(rng.uniform(0.5, 1.0, n), rng.exponential(1.0 / np.exp(0.25 + z[:, 2])))
    x = np.minimum(t, c)
    status = (t <= c).astype(float)
    ds = ObservationalDataset(z=z, r=r, time=x, status=status, mode="survival")
    return Simulated(ds, mu1 / mu0, mu0, mu1, pi, extra={"event_time": t, "censor_time": c})


def censoring_rate(sim: Simulated) -> float:
    """Fraction of units whose event time exceeds their censoring time."""
    return float(np.mean(sim.dataset.status == 0))
