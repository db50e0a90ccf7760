import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvplnmix.errors import DataError
from mvplnmix.tensor_io import (
    CountTensor,
    LibrarySizes,
    compute_library_sizes,
    devectorize_unit,
    load_counts,
    load_library_sizes,
    vectorize_unit,
    write_counts,
    write_library_sizes,
)


def _write(tmp_path, text, name="counts.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_small_file(tmp_path):
    path = _write(tmp_path, "unit_id,a,b\na,1,2\nb,0,0\nc,5,3\n")
    t = load_counts(path, 1, 2)
    assert t.n == 3
    assert t.unit_ids == ("a", "b", "c")
    np.testing.assert_array_equal(t.counts, [[[1, 2]], [[0, 0]], [[5, 3]]])


def test_dimension_mismatch(tmp_path):
    path = _write(tmp_path, "unit_id,c1,c2,c3,c4,c5\nx,1,2,3,4,5\n")
    with pytest.raises(DataError, match="dimension mismatch"):
        load_counts(path, 2, 3)


@pytest.mark.parametrize(
    "row, match",
    [("x,1,-2", "negative"), ("x,1,2.5", "fractional"), ("x,1,abc", "non-numeric"), ("x,1", "count columns")],
)
def test_malformed_counts(tmp_path, row, match):
    path = _write(tmp_path, f"unit_id,a,b\n{row}\n")
    with pytest.raises(DataError, match=match):
        load_counts(path, 1, 2)


def test_duplicate_unit(tmp_path):
    path = _write(tmp_path, "unit_id,a,b\nx,1,2\nx,3,4\n")
    with pytest.raises(DataError, match="duplicate"):
        load_counts(path, 1, 2)


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_counts(tmp_path / "nope.csv", 1, 1)


def test_large_file_shape(tmp_path):
    rng = np.random.default_rng(0)
    t = CountTensor(rng.poisson(20, size=(1336, 2, 3)))
    path = tmp_path / "beans.csv"
    write_counts(t, path)
    back = load_counts(path, 2, 3)
    assert back.n == 1336
    np.testing.assert_array_equal(back.counts, t.counts)
    assert back.occasion_ids == t.occasion_ids and back.variable_ids == t.variable_ids


@pytest.mark.parametrize(
    "Y, v",
    [([[1, 2, 3], [4, 5, 6]], [1, 2, 3, 4, 5, 6]), ([[7]], [7]), ([[0, 9], [8, 0]], [0, 9, 8, 0])],
)
def test_vectorize_examples(Y, v):
    np.testing.assert_array_equal(vectorize_unit(Y), v)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_vectorize_roundtrip(r, p, seed):
    Y = np.random.default_rng(seed).integers(0, 100, size=(r, p))
    v = vectorize_unit(Y)
    assert v[(r - 1) * p + (p - 1)] == Y[r - 1, p - 1]
    np.testing.assert_array_equal(devectorize_unit(v, r, p), Y)


def test_total_count_identical_columns():
    t = CountTensor(np.array([[[3, 3]], [[5, 5]], [[1, 1]]]))
    np.testing.assert_allclose(compute_library_sizes(t, "total").s, [1.0, 1.0])


def test_total_count_example():
    t = CountTensor(np.array([[[60, 300]], [[40, 100]]]))
    np.testing.assert_allclose(compute_library_sizes(t, "total-count").s, [0.5, 2.0])


def test_tmm_scaled_column():
    rng = np.random.default_rng(3)
    a = rng.integers(1, 200, size=50)
    t = CountTensor(np.stack([a, 3 * a], axis=1)[:, None, :])
    s = compute_library_sizes(t, "tmm").s
    assert abs(s[1] / s[0] - 3.0) < 1e-9


@given(st.integers(0, 2**31))
@settings(max_examples=25)
def test_library_sizes_geometric_mean_one(seed):
    rng = np.random.default_rng(seed)
    t = CountTensor(rng.poisson(rng.uniform(5, 50, size=6), size=(40, 6)).reshape(40, 2, 3))
    for method in ("total", "tmm"):
        s = compute_library_sizes(t, method).s
        assert abs(np.mean(np.log(s))) < 1e-10


def test_zero_column_rejected():
    t = CountTensor(np.array([[[1, 0]], [[2, 0]]]))
    with pytest.raises(DataError, match="all-zero"):
        compute_library_sizes(t, "total")


def test_library_size_roundtrip(tmp_path):
    s = LibrarySizes(np.array([0.5, 1.25, 1.6]))
    write_library_sizes(s, tmp_path / "s.csv")
    np.testing.assert_array_equal(load_library_sizes(tmp_path / "s.csv").s, s.s)


@pytest.mark.parametrize("bad", [[1.0, 0.0], [1.0, -2.0], [np.inf]])
def test_library_sizes_positive(bad):
    with pytest.raises(DataError):
        LibrarySizes(np.array(bad))


def test_tensor_validation():
    with pytest.raises(DataError):
        CountTensor(np.zeros((2, 2)))
    with pytest.raises(DataError):
        CountTensor(np.array([[[1.5]]]))
    with pytest.raises(DataError):
        CountTensor(np.array([[[-1]]]))
