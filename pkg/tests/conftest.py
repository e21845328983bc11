import numpy as np
import pytest

from ratiocate.data import ObservationalDataset


def write_text(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def poisson_data(n, seed=0, *, d=2, delta=(0.2, 0.5, 0.0), beta0=(0.1, 0.3, -0.2), confound=True, exposure=False):
    """Log-linear arms with a logistic propensity; ``delta`` is the true log-CATE."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, d))
    X = np.column_stack([np.ones(n), z])
    lin = 0.4 * z[:, 0] - 0.3 * z[:, 1] if confound else np.zeros(n)
    pi = 1 / (1 + np.exp(-lin))
    r = rng.binomial(1, pi)
    mu0 = np.exp(X @ np.asarray(beta0))
    mu1 = mu0 * np.exp(X @ np.asarray(delta))
    f = rng.uniform(0.5, 1.5, n) if exposure else np.ones(n)
    y = rng.poisson(np.where(r == 1, mu1, mu0) * f)
    ds = ObservationalDataset(z=z, r=r, y=y, exposure=f if exposure else None)
    return ds, {"mu0": mu0, "mu1": mu1, "pi1": pi}


def oracle_bundle(ds, mu0, mu1, pi1, k=2, seed=0):
    """A bundle carrying known nuisance values instead of fitted models."""
    from ratiocate.data import make_folds
    from ratiocate.nuisance import NuisanceBundle

    plan = make_folds(ds.n, k, ds.r, seed)
    as_arr = lambda v: np.broadcast_to(np.asarray(v, float), (ds.n,)).copy()
    return NuisanceBundle(plan, (), (), (), as_arr(mu0), as_arr(mu1), as_arr(pi1))


def draw_discrete(inst, n, seed):
    """Sample (Z, R, Y) from a finite-support instance with Poisson outcomes."""
    rng = np.random.default_rng(seed)
    k = rng.choice(len(inst.prob), size=n, p=inst.prob)
    r = rng.binomial(1, inst.pi1[k])
    y = rng.poisson(np.where(r == 1, inst.mu1[k], inst.mu0[k]))
    return k, r, y
