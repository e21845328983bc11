import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ratiocate.data import DataError, ObservationalDataset, load_csv, make_folds, normalize_exposure, write_csv

from conftest import write_text


def test_load_small_file(tmp_path):
    p = write_text(tmp_path, "d.csv", "y,r,z1\n0,0,0.5\n1,0,1.5\n2,1,-1\n3,1,2\n")
    ds = load_csv(p)
    assert (ds.n, ds.d) == (4, 1)
    np.testing.assert_array_equal(ds.y, [0, 1, 2, 3])
    np.testing.assert_array_equal(ds.r, [0, 0, 1, 1])


def test_bad_treatment_value_names_row_and_column(tmp_path):
    p = write_text(tmp_path, "d.csv", "y,r,z1\n0,0,0\n1,2,0\n2,1,1\n")
    with pytest.raises(DataError) as info:
        load_csv(p)
    msg = str(info.value)
    assert "r" in msg and ("row 1" in msg or "row 2" in msg or "line" in msg)


def test_exposure_column_then_normalize(tmp_path):
    p = write_text(tmp_path, "d.csv", "y,r,f,z1\n0,0,0.5,0\n1,0,0.5,1\n2,1,1,2\n3,1,1,3\n")
    ds = load_csv(p)
    assert ds.exposure is not None
    out = normalize_exposure(ds)
    np.testing.assert_array_equal(out.y, [0, 2, 2, 3])
    assert out.exposure is None and (out.n, out.d) == (ds.n, ds.d)


@pytest.mark.parametrize(
    "y,f,expected",
    [((2, 3), (1, 1), (2, 3)), ((2, 3), (0.5, 1.5), (4, 2))],
)
def test_normalize_exposure_examples(y, f, expected):
    ds = ObservationalDataset(z=[[0.0], [1.0]], r=[0, 1], y=y, exposure=f)
    np.testing.assert_allclose(normalize_exposure(ds).y, expected)


def test_zero_exposure_rejected():
    with pytest.raises(DataError):
        ObservationalDataset(z=[[0.0], [1.0]], r=[0, 1], y=[1, 1], exposure=[0.0, 1.0])


def test_normalize_without_exposure_rejected():
    ds = ObservationalDataset(z=[[0.0], [1.0]], r=[0, 1], y=[1, 1])
    with pytest.raises(DataError):
        normalize_exposure(ds)


@pytest.mark.parametrize(
    "body",
    [
        "y,r\n1,0\n2,1\n",  # no covariates
        "y,r,z1\n1,0,a\n2,1,0\n",  # non-numeric
        "y,r,z1\n1,0,0\n2,0,1\n",  # empty arm
        "y,r,z1\n-1,0,0\n2,1,1\n",  # negative outcome
        "y,r,z1\n1,0,\n2,1,1\n",  # missing cell
        "r,z1\n0,0\n1,1\n",  # missing outcome column
    ],
)
def test_invalid_files(tmp_path, body):
    with pytest.raises(DataError):
        load_csv(write_text(tmp_path, "bad.csv", body))


def test_schema_remaps_columns(tmp_path):
    p = write_text(tmp_path, "d.csv", "count,arm,age,sex\n1,0,30,0\n2,1,40,1\n0,1,50,0\n")
    ds = load_csv(p, {"y": "count", "r": "arm", "z": ["age", "sex"]})
    assert ds.covariate_names == ("age", "sex")
    np.testing.assert_array_equal(ds.z[:, 0], [30, 40, 50])


def test_survival_mode(tmp_path):
    p = write_text(tmp_path, "s.csv", "r,time,status,z1\n0,1.5,1,0\n1,0.2,0,1\n1,0.7,1,2\n")
    ds = load_csv(p, mode="survival")
    assert ds.mode == "survival"
    np.testing.assert_array_equal(ds.status, [1, 0, 1])


def test_covariates_are_not_clipped(tmp_path):
    p = write_text(tmp_path, "d.csv", "y,r,z1\n1,0,-7.5\n2,1,9\n")
    np.testing.assert_array_equal(load_csv(p).z[:, 0], [-7.5, 9])


@settings(max_examples=40, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.integers(0, 50),
            st.floats(-1e6, 1e6, allow_nan=False, width=64),
            st.floats(1e-3, 10, allow_nan=False),
        ),
        min_size=2,
        max_size=30,
    )
)
def test_csv_round_trip_is_exact(tmp_path_factory, rows):
    y = np.array([r[0] for r in rows], float)
    z = np.array([[r[1]] for r in rows])
    f = np.array([r[2] for r in rows])
    r = np.arange(len(rows)) % 2
    ds = ObservationalDataset(z=z, r=r, y=y, exposure=f)
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(ds, path)
    back = load_csv(path)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.z, ds.z)
    np.testing.assert_array_equal(back.exposure, ds.exposure)
    np.testing.assert_array_equal(back.r, ds.r)


def test_make_folds_balanced_example():
    r = np.array([0, 1] * 5)
    plan = make_folds(10, 2, r, seed=1)
    for k in range(2):
        idx = plan.fold(k)
        assert idx.size == 5
        assert r[idx].sum() in (2, 3)


def test_make_folds_deterministic():
    r = np.array([0, 1] * 20)
    a = make_folds(40, 4, r, seed=7).assignment
    b = make_folds(40, 4, r, seed=7).assignment
    np.testing.assert_array_equal(a, b)


def test_make_folds_cannot_stratify():
    with pytest.raises(DataError):
        make_folds(6, 5, [1, 1, 0, 0, 0, 0], seed=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**32 - 1), st.data())
def test_fold_plan_is_a_stratified_partition(k, seed, data):
    n1 = data.draw(st.integers(k, 60))
    n0 = data.draw(st.integers(k, 60))
    r = np.r_[np.ones(n1, int), np.zeros(n0, int)]
    r = np.random.default_rng(seed).permutation(r)
    plan = make_folds(r.size, k, r, seed)
    sizes = np.bincount(plan.assignment, minlength=k)
    assert sizes.sum() == r.size and sizes.min() >= 1
    assert sizes.max() - sizes.min() <= 1
    treated = np.bincount(plan.assignment, weights=r, minlength=k)
    assert np.all(np.abs(treated - r.sum() / k) <= 1)
    assert np.all(treated >= 1) and np.all(sizes - treated >= 1)
