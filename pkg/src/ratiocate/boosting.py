"""Gradient-boosted depth-2 regression trees under Poisson deviance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .glm import DEFAULT_CLIP_MU

DEFAULT_LEARNING_RATE = 0.1
DEFAULT_TREE_GRID = (10, 16, 25, 40, 63, 100, 158, 251, 398, 500)
DEFAULT_CV_FOLDS = 5
MIN_LEAF = 5
# cap on a single leaf's log-scale step
MAX_LEAF_STEP = 5.0


@dataclass(frozen=True)
class Tree:
    """Depth-<=2 tree as flat arrays.

    Internal nodes carry ``feature``/``threshold`` (``x <= threshold`` goes
    left), leaves carry ``value``. Node 0 is the root; ``left``/``right`` are
    child indices (-1 for leaves).
    """

    feature: tuple
    threshold: tuple
    left: tuple
    right: tuple
    value: tuple

    def apply(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape[0])
        stack = [(0, np.arange(X.shape[0]))]
        while stack:
            node, idx = stack.pop()
            if self.left[node] < 0:
                out[idx] = self.value[node]
                continue
            go_left = X[idx, self.feature[node]] <= self.threshold[node]
            stack.append((self.left[node], idx[go_left]))
            stack.append((self.right[node], idx[~go_left]))
        return out

    @property
    def n_leaves(self) -> int:
        return sum(1 for c in self.left if c < 0)

    def to_dict(self) -> dict:
        def node(i):
            if self.left[i] < 0:
                return {"leaf": self.value[i]}
            return {
                "feature": self.feature[i],
                "threshold": self.threshold[i],
                "left": node(self.left[i]),
                "right": node(self.right[i]),
            }

        return node(0)

    @classmethod
    def from_dict(cls, doc: dict) -> "Tree":
        cols = {k: [] for k in ("feature", "threshold", "left", "right", "value")}

        def add(d):
            i = len(cols["value"])
            for k in cols:
                cols[k].append(-1 if k in ("feature", "left", "right") else 0.0)
            if "leaf" in d:
                cols["value"][i] = float(d["leaf"])
                return i
            cols["feature"][i] = int(d["feature"])
            cols["threshold"][i] = float(d["threshold"])
            cols["left"][i] = add(d["left"])
            cols["right"][i] = add(d["right"])
            return i

        add(doc)
        return cls(**{k: tuple(v) for k, v in cols.items()})


@dataclass(frozen=True)
class BoostedPoissonModel:
    trees: tuple
    base_score: float
    learning_rate: float
    clip_mu: float = DEFAULT_CLIP_MU
    cv_deviance: tuple = field(default=(), compare=False)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict_log(self, z, n_trees: int | None = None) -> np.ndarray:
        X = np.asarray(z, float)
        if X.ndim == 1:
            X = X[:, None]
        eta = np.full(X.shape[0], self.base_score)
        for t in self.trees[: self.n_trees if n_trees is None else n_trees]:
            eta += self.learning_rate * t.apply(X)
        return eta

    def predict(self, z, n_trees: int | None = None) -> np.ndarray:
        return np.clip(np.exp(self.predict_log(z, n_trees)), self.clip_mu, 1.0 / self.clip_mu)

    def to_dict(self) -> dict:
        return {
            "kind": "boosted_poisson",
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "clip_mu": self.clip_mu,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BoostedPoissonModel":
        return cls(
            tuple(Tree.from_dict(t) for t in doc["trees"]),
            float(doc["base_score"]),
            float(doc["learning_rate"]),
            doc.get("clip_mu", DEFAULT_CLIP_MU),
        )


@njit(cache=True)
def _scan_splits(order, xs, members, g, h, min_leaf):
    d, n = order.shape
    Gt = 0.0
    Ht = 0.0
    m = 0
    for i in range(n):
        if members[i]:
            Gt += g[i]
            Ht += h[i]
            m += 1
    best, best_j, best_thr = 0.0, -1, 0.0
    if m < 2 * min_leaf or Ht <= 0.0:
        return best, best_j, best_thr
    parent = Gt * Gt / Ht
    for j in range(d):
        GL = 0.0
        HL = 0.0
        cl = 0
        prev = 0.0
        for p in range(n):
            i = order[j, p]
            if not members[i]:
                continue
            x = xs[j, p]
            # candidate cut between the previous member and this one
            if cl >= min_leaf and m - cl >= min_leaf and x > prev:
                HR = Ht - HL
                if HL > 0.0 and HR > 0.0:
                    GR = Gt - GL
                    gain = GL * GL / HL + GR * GR / HR - parent
                    if gain > best:
                        best = gain
                        best_j = j
                        thr = 0.5 * (prev + x)
                        best_thr = thr if thr > prev else prev
            GL += g[i]
            HL += h[i]
            cl += 1
            prev = x
    if best <= 1e-12 * max(abs(parent), 1e-300):
        return 0.0, -1, 0.0
    return best, best_j, best_thr


class _Presorted:
    """Per-feature sort orders of a training matrix, reused by every tree."""

    def __init__(self, X: np.ndarray):
        self.X = X
        self.order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)  # (d, n)
        self.xs = np.ascontiguousarray(np.take_along_axis(X.T, self.order, axis=1))
        self.all = np.ones(X.shape[0], dtype=np.bool_)

    def best_split(self, members: np.ndarray | None, g, h, min_leaf):
        """Best Newton-gain split of the rows flagged in ``members``.

        Ties go to the lowest feature index, then the lowest threshold.
        Returns ``(gain, feature, threshold, left_mask)`` or ``None``.
        """
        mem = self.all if members is None else members
        gain, j, thr = _scan_splits(self.order, self.xs, mem, g, h, min_leaf)
        if j < 0:
            return None
        left = mem & (self.X[:, j] <= thr)
        return gain, j, thr, left


def _leaf_step(y, w, mu, mask):
    sy = np.sum(w[mask] * y[mask])
    smu = np.sum(w[mask] * mu[mask])
    if smu <= 0:
        return 0.0
    if sy <= 0:
        return -MAX_LEAF_STEP
    return float(np.clip(np.log(sy / smu), -MAX_LEAF_STEP, MAX_LEAF_STEP))


def _grow_tree(pre: _Presorted, y, w, eta, min_leaf) -> tuple[Tree, np.ndarray]:
    """One depth-2 tree on the Poisson gradient; returns the tree and its raw leaf steps per row."""
    mu = np.exp(eta)
    g = w * (mu - y)
    h = w * mu
    n = y.size
    root = pre.best_split(None, g, h, min_leaf)
    if root is None:
        v = _leaf_step(y, w, mu, np.ones(n, dtype=bool))
        return Tree((-1,), (0.0,), (-1,), (-1,), (v,)), np.full(n, v)

    _, j0, t0, left0 = root
    steps = np.empty(n)
    nodes = [[j0, t0, -1, -1, 0.0]]  # feature, threshold, left, right, value

    def leaf(v):
        nodes.append([-1, 0.0, -1, -1, v])
        return len(nodes) - 1

    for side, mask in ((2, left0), (3, ~left0)):
        split = pre.best_split(mask, g, h, min_leaf)
        if split is None:
            v = _leaf_step(y, w, mu, mask)
            nodes[0][side] = leaf(v)
            steps[mask] = v
            continue
        _, j, t, sub_left = split
        me = len(nodes)
        nodes.append([j, t, -1, -1, 0.0])
        nodes[0][side] = me
        for child, rows in ((2, mask & sub_left), (3, mask & ~sub_left)):
            v = _leaf_step(y, w, mu, rows)
            nodes[me][child] = leaf(v)
            steps[rows] = v
    tree = Tree(*(tuple(col) for col in zip(*nodes)))
    return tree, steps


class _Booster:
    """Incremental stagewise fit; ``step()`` adds one tree."""

    def __init__(self, X, y, w, learning_rate, min_leaf, X_eval=None, y_eval=None, w_eval=None):
        self.y, self.w = y, w
        self.learning_rate, self.min_leaf = learning_rate, min_leaf
        self.base = float(np.log(np.sum(w * y) / np.sum(w)))
        self.pre = _Presorted(X)
        self.eta = np.full(y.size, self.base)
        self.trees = []
        self.X_eval, self.y_eval, self.w_eval = X_eval, y_eval, w_eval
        if X_eval is not None:
            self.eta_eval = np.full(X_eval.shape[0], self.base)

    def step(self):
        tree, steps = _grow_tree(self.pre, self.y, self.w, self.eta, self.min_leaf)
        self.trees.append(tree)
        self.eta = self.eta + self.learning_rate * steps
        if self.X_eval is not None:
            self.eta_eval = self.eta_eval + self.learning_rate * tree.apply(self.X_eval)

    def eval_deviance(self) -> float:
        return _mean_deviance(self.y_eval, self.eta_eval, self.w_eval)


def _mean_deviance(y, eta, w):
    mu = np.exp(eta)
    ylogy = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0)), 0.0)
    return float(2.0 * np.sum(w * (ylogy - y * eta - (y - mu))) / np.sum(w))


def fit_boosted_poisson(
    z,
    y,
    weights=None,
    *,
    n_trees: int | None = None,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    tree_grid=DEFAULT_TREE_GRID,
    cv_folds: int = DEFAULT_CV_FOLDS,
    min_leaf: int = MIN_LEAF,
    seed: int = 0,
    clip_mu: float = DEFAULT_CLIP_MU,
) -> BoostedPoissonModel:
    """Stagewise Poisson boosting with depth-2 trees.

    When ``n_trees`` is None the tree count is the member of ``tree_grid``
    with the smallest ``cv_folds``-fold cross-validated deviance.
    """
    X = np.asarray(z, float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, float)
    n = y.size
    if n < 10:
        raise ValueError("boosting needs at least 10 rows")
    if np.any(y < 0):
        raise ValueError("outcome must be nonnegative")
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    if not np.sum(w * y) > 0:
        raise ValueError("degenerate outcome: all zero")
    if not 0 < learning_rate <= 1:
        raise ValueError("learning_rate must lie in (0, 1]")

    cv = ()
    if n_trees is None:
        n_trees, cv = select_n_trees(X, y, w, learning_rate, tree_grid, cv_folds, min_leaf, seed)
    booster = _Booster(X, y, w, learning_rate, min_leaf)
    for _ in range(n_trees):
        booster.step()
    return BoostedPoissonModel(tuple(booster.trees), booster.base, learning_rate, clip_mu, cv_deviance=cv)


def select_n_trees(X, y, w, learning_rate, tree_grid, cv_folds, min_leaf, seed, patience=2):
    """Cross-validated choice of the tree count.

    All folds grow in lockstep; the search stops once the mean held-out
    deviance has risen at ``patience`` consecutive grid points. Returns
    ``(n_trees, mean deviances at the evaluated grid points)``.
    """
    grid = sorted(int(t) for t in tree_grid)
    rng = np.random.default_rng(seed)
    fold = rng.permutation(y.size) % cv_folds
    boosters = []
    for k in range(cv_folds):
        tr, te = fold != k, fold == k
        if np.sum(w[tr] * y[tr]) > 0:
            boosters.append(_Booster(X[tr], y[tr], w[tr], learning_rate, min_leaf, X[te], y[te], w[te]))
    curve = []
    grown = 0
    worse = 0
    for target in grid:
        while grown < target:
            for b in boosters:
                b.step()
            grown += 1
        curve.append(float(np.mean([b.eval_deviance() for b in boosters])))
        worse = worse + 1 if len(curve) > 1 and curve[-1] > curve[-2] else 0
        if worse >= patience:
            break
    return grid[int(np.argmin(curve))], tuple(curve)
