"""Observational datasets, CSV ingestion and cross-fitting fold plans."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_FOLDS = 7
DEFAULT_PARTITION_REPLICATES = 3


class DataError(ValueError):
    """Raised when input data violates the dataset contract."""


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ObservationalDataset:
    """Outcome, treatment and covariates for ``n`` units.

    ``y`` drives count/rate analyses. For time-to-event data ``time`` and
    ``status`` are set instead (``y`` may be omitted) and ``mode`` is
    ``"survival"``.
    """

    z: np.ndarray
    r: np.ndarray
    y: np.ndarray | None = None
    exposure: np.ndarray | None = None
    time: np.ndarray | None = None
    status: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()
    mode: str = "count"

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.ndim != 2:
            raise DataError("z must be a 2-d matrix")
        n = z.shape[0]
        object.__setattr__(self, "z", _frozen(z))
        r = np.asarray(self.r, dtype=float)
        if r.shape != (n,):
            raise DataError(f"r has length {r.size}, expected {n}")
        bad = np.flatnonzero((r != 0) & (r != 1))
        if bad.size:
            raise DataError(f"row {bad[0]}: treatment must be 0 or 1, got {r[bad[0]]:g}")
        object.__setattr__(self, "r", _frozen(r, dtype=np.int8))
        if not np.all(np.isfinite(z)):
            raise DataError("non-finite covariate value")
        n1 = int(self.r.sum())
        if n1 == 0 or n1 == n:
            raise DataError("both treatment arms must be nonempty")

        for name in ("y", "exposure", "time", "status"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=float)
            if v.shape != (n,):
                raise DataError(f"{name} has length {v.size}, expected {n}")
            if not np.all(np.isfinite(v)):
                raise DataError(f"non-finite value in {name}")
            object.__setattr__(self, name, _frozen(v))

        if self.mode not in ("count", "survival"):
            raise DataError(f"unknown mode {self.mode!r}")
        if self.mode == "count":
            if self.y is None:
                raise DataError("count mode requires an outcome y")
            neg = np.flatnonzero(self.y < 0)
            if neg.size:
                raise DataError(f"row {neg[0]}: negative outcome {self.y[neg[0]]:g}")
        else:
            if self.time is None or self.status is None:
                raise DataError("survival mode requires time and status")
            if np.any(self.time < 0):
                raise DataError("negative survival time")
            if np.any((self.status != 0) & (self.status != 1)):
                raise DataError("status must be 0 or 1")
        if self.exposure is not None and np.any(self.exposure <= 0):
            raise DataError("exposure must be strictly positive")

        names = tuple(self.covariate_names) or tuple(f"z{j + 1}" for j in range(z.shape[1]))
        if len(names) != z.shape[1]:
            raise DataError("covariate_names does not match the number of columns of z")
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def d(self) -> int:
        return self.z.shape[1]

    @property
    def design(self) -> np.ndarray:
        """Covariates with a leading intercept column."""
        return add_intercept(self.z)

    def subset(self, idx) -> "ObservationalDataset":
        idx = np.asarray(idx)
        take = lambda v: None if v is None else v[idx]
        return replace(
            self,
            z=self.z[idx],
            r=self.r[idx],
            y=take(self.y),
            exposure=take(self.exposure),
            time=take(self.time),
            status=take(self.status),
        )


def add_intercept(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    return np.hstack([np.ones((z.shape[0], 1)), z])


def normalize_exposure(ds: ObservationalDataset) -> ObservationalDataset:
    """Replace the outcome by the rate ``y / exposure`` and drop the exposure."""
    if ds.exposure is None:
        raise DataError("dataset has no exposure column")
    if ds.y is None:
        raise DataError("dataset has no outcome to normalize")
    return replace(ds, y=ds.y / ds.exposure, exposure=None)


DEFAULT_SCHEMA = {"y": "y", "r": "r", "f": "f", "time": "time", "status": "status"}


def load_csv(path, schema: Mapping[str, object] | None = None, mode: str | None = None) -> ObservationalDataset:
    """Read a dataset from a header CSV.

    ``schema`` maps roles (``y``, ``r``, ``z``, ``f``, ``time``, ``status``) to
    column names; ``z`` is a list of names and defaults to every column named
    ``z1``, ``z2``, ... in header order. ``mode`` defaults to ``"survival"``
    when both time and status columns are present and no outcome column is.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    sch = dict(DEFAULT_SCHEMA)
    if schema:
        sch.update(schema)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [row for row in reader if row and any(c.strip() for c in row)]
    col = {h: j for j, h in enumerate(header)}

    zcols = sch.get("z")
    if zcols is None:
        zcols = [h for h in header if h.startswith("z") and h[1:].isdigit()]
    zcols = list(zcols)
    if not zcols:
        raise DataError("no covariate columns found")

    has = lambda role: sch.get(role) in col
    if mode is None:
        mode = "survival" if has("time") and has("status") and not has("y") else "count"
    required = ["r"] + (["y"] if mode == "count" else ["time", "status"])
    for role in required:
        if not has(role):
            raise DataError(f"missing column {sch[role]!r} (role {role})")
    for c in zcols:
        if c not in col:
            raise DataError(f"missing column {c!r}")

    def column(name):
        j = col[name]
        out = np.empty(len(rows))
        for i, row in enumerate(rows):
            cell = row[j].strip() if j < len(row) else ""
            if cell == "":
                raise DataError(f"row {i}: missing value in column {name!r}")
            try:
                out[i] = float(cell)
            except ValueError:
                raise DataError(f"row {i}: non-numeric value {cell!r} in column {name!r}") from None
            if not math.isfinite(out[i]):
                raise DataError(f"row {i}: non-finite value in column {name!r}")
        return out

    r = column(sch["r"])
    bad = np.flatnonzero((r != 0) & (r != 1))
    if bad.size:
        raise DataError(f"row {bad[0]}: column {sch['r']!r} must be 0 or 1, got {r[bad[0]]:g}")
    z = np.column_stack([column(c) for c in zcols])
    kw = {}
    if has("y") and mode == "count":
        kw["y"] = column(sch["y"])
        neg = np.flatnonzero(kw["y"] < 0)
        if neg.size:
            raise DataError(f"row {neg[0]}: negative outcome in column {sch['y']!r}")
    if has("f"):
        kw["exposure"] = column(sch["f"])
    if mode == "survival":
        kw["time"] = column(sch["time"])
        kw["status"] = column(sch["status"])
    return ObservationalDataset(z=z, r=r, covariate_names=tuple(zcols), mode=mode, **kw)


def write_csv(ds: ObservationalDataset, path, precision: int = 17) -> None:
    """Write ``ds`` with the default column names; inverse of :func:`load_csv`."""
    cols: list[tuple[str, np.ndarray]] = []
    if ds.y is not None:
        cols.append(("y", ds.y))
    cols.append(("r", ds.r.astype(float)))
    if ds.exposure is not None:
        cols.append(("f", ds.exposure))
    if ds.time is not None:
        cols += [("time", ds.time), ("status", ds.status)]
    cols += [(name, ds.z[:, j]) for j, name in enumerate(ds.covariate_names)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([c for c, _ in cols])
        for i in range(ds.n):
            w.writerow([format(v[i], f".{precision}g") for _, v in cols])


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Assignment of units to ``k`` folds (labels ``0..k-1``)."""

    k: int
    assignment: np.ndarray
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "assignment", _frozen(self.assignment, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.assignment.size

    def fold(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def complement(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)


def _deal(idx: np.ndarray, k: int, offset: int) -> np.ndarray:
    # round-robin over a shuffled index keeps fold counts within one
    labels = np.empty(idx.size, dtype=np.int64)
    labels[:] = (np.arange(idx.size) + offset) % k
    return labels


def make_folds(n: int, k: int, r: Sequence[int], seed: int = 0) -> FoldPlan:
    """Stratified random partition of ``n`` units into ``k`` folds.

    Treated and control units are shuffled and dealt round-robin, so every
    fold holds ``floor`` or ``ceil`` of each arm's share and fold sizes differ
    by at most one.
    """
    r = np.asarray(r)
    if k < 2:
        raise DataError("need at least two folds")
    if r.shape != (n,):
        raise DataError("treatment vector length does not match n")
    if n < 2 * k:
        raise DataError(f"n={n} too small for {k} folds")
    treated = np.flatnonzero(r == 1)
    control = np.flatnonzero(r == 0)
    if min(treated.size, control.size) < k:
        raise DataError(f"cannot stratify: an arm has fewer than k={k} units")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    t = rng.permutation(treated)
    c = rng.permutation(control)
    assignment[t] = _deal(t, k, 0)
    # continue the deal where the treated arm stopped so totals stay balanced
    assignment[c] = _deal(c, k, t.size % k)
    return FoldPlan(k=k, assignment=assignment, seed=seed)
