import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsquant.errors import DomainError, ShapeError
from tsquant.smoothing import apply_smoothing, channel_absmax, compute_smoothing


def test_direct_formula_example():
    a = np.array([4.0, 1.0, 9.0])
    w = np.array([[1.0, -1.0], [0.25, 0.0], [-4.0, 1.0]])
    d = compute_smoothing(a, w, 0.5)
    np.testing.assert_allclose(d, [2.0, 2.0, 1.5])


def test_migration_extremes():
    a = np.array([3.0, 0.5])
    w = np.array([[2.0], [8.0]])
    np.testing.assert_allclose(compute_smoothing(a, w, 1.0), a)
    np.testing.assert_allclose(compute_smoothing(a, w, 0.0), 1 / np.array([2.0, 8.0]))


def test_floor_for_dead_channel():
    d = compute_smoothing(np.zeros(2), np.ones((2, 3)), 0.5)
    assert np.all(d >= 1e-5) and np.all(np.isfinite(d))


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_product_preserved(seed, migration):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((8, 16)) * rng.uniform(0.1, 20, 16)
    w = rng.standard_normal((16, 5))
    d = compute_smoothing(channel_absmax(x), w, migration)
    xs, ws = apply_smoothing(x, w, d)
    np.testing.assert_allclose(xs @ ws, x @ w, rtol=1e-10, atol=1e-10 * np.abs(x @ w).max())


def test_smoothing_balances_ranges(rng):
    x = rng.standard_normal((32, 8))
    x[:, 2] *= 50
    w = rng.standard_normal((8, 4))
    d = compute_smoothing(channel_absmax(x), w, 0.5)
    xs, ws = apply_smoothing(x, w, d)
    ratio_before = np.abs(x).max(0).max() / np.abs(x).max(0).min()
    ratio_after = np.abs(xs).max(0).max() / np.abs(xs).max(0).min()
    assert ratio_after < ratio_before


def test_channel_absmax_over_list(rng):
    xs = [rng.standard_normal((4, 6)) for _ in range(3)]
    np.testing.assert_array_equal(channel_absmax(xs), np.abs(np.vstack(xs)).max(0))
    with pytest.raises(ShapeError):
        channel_absmax([])


def test_validation():
    w = np.ones((3, 2))
    with pytest.raises(ShapeError):
        compute_smoothing(np.ones(2), w)
    with pytest.raises(DomainError):
        compute_smoothing(-np.ones(3), w)
    with pytest.raises(DomainError):
        compute_smoothing(np.ones(3), w, 1.5)
    with pytest.raises(DomainError):
        apply_smoothing(np.ones((1, 3)), w, np.array([1.0, 0.0, 1.0]))
    with pytest.raises(ShapeError):
        apply_smoothing(np.ones((1, 2)), w, np.ones(3))
