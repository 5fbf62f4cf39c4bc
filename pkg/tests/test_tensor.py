import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transplant.tensor import (NonFiniteError, axpy_norms, check_finite, check_shape, make_rng, numel,
                               randn, reshape, resolve_dtype, zeros)


def test_zeros_examples():
    assert zeros([2, 2]).tolist() == [[0, 0], [0, 0]]
    assert zeros([1]).tolist() == [0]
    z = zeros([3, 1, 1])
    assert z.shape == (3, 1, 1) and not z.any()


def test_zeros_default_single_precision():
    assert zeros([2]).dtype == np.float32
    assert zeros([2], "double").dtype == np.float64


@pytest.mark.parametrize("bad", [[], [0], [2, -1]])
def test_invalid_shapes_rejected(bad):
    with pytest.raises(ValueError):
        check_shape(bad)


def test_resolve_dtype_rejects_ints_and_unknown_names():
    with pytest.raises(ValueError):
        resolve_dtype(np.int32)
    with pytest.raises(ValueError):
        resolve_dtype("half")


def test_randn_same_seed_bitwise_identical():
    a = randn([4, 5], make_rng(7))
    b = randn([4, 5], make_rng(7))
    assert a.tobytes() == b.tobytes()
    assert randn([4, 5], make_rng(8)).tobytes() != a.tobytes()


def test_randn_single_and_double_share_stream():
    a = randn([100], make_rng(3), "double")
    b = randn([100], make_rng(3), "single")
    assert np.array_equal(a.astype(np.float32), b)


def test_randn_advances_by_element_count():
    r1 = make_rng(11)
    randn([3, 4], r1)
    r2 = make_rng(11)
    r2.standard_normal(12)
    assert r1.standard_normal() == r2.standard_normal()


def test_randn_moments_over_a_million_draws():
    x = randn([1_000_000], make_rng(2024), "double")
    assert -0.01 <= x.mean() <= 0.01
    assert 0.99 <= x.var() <= 1.01


def test_make_rng_frozen_stream():
    # PCG64 output for seed 0 is fixed by numpy's bit-generator contract
    assert make_rng(0).integers(0, 2**31, 3).tolist() == np.random.Generator(
        np.random.PCG64(0)).integers(0, 2**31, 3).tolist()


def test_axpy_norms_examples():
    a = np.array([1.0, -2.0, 3.0])
    assert axpy_norms(a, a, 1.0) == 0.0
    assert axpy_norms(np.array([1.0, 2.0]), np.zeros(2), 1.0) == 5.0
    with pytest.raises(ValueError):
        axpy_norms(np.zeros(2), np.zeros(3), 1.0)


def test_axpy_norms_against_scalar_loop(rng):
    for _ in range(10):
        n = int(rng.integers(1, 10_000))
        a, b = rng.standard_normal(n), rng.standard_normal(n)
        alpha = float(rng.standard_normal())
        ref = 0.0
        for ai, bi in zip(a.tolist(), b.tolist()):
            ref += (alpha * ai - bi) ** 2
        assert abs(axpy_norms(a, b, alpha) - ref) <= 1e-12 * max(1.0, ref)


def test_check_finite_rejects_nan_and_inf():
    check_finite(np.ones(3))
    for bad in (np.nan, np.inf, -np.inf):
        with pytest.raises(NonFiniteError):
            check_finite(np.array([1.0, bad]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**32))
def test_reshape_round_trip_bitwise(dims, seed):
    x = np.random.default_rng(seed).standard_normal(dims)
    y = reshape(x, [numel(dims)])
    assert reshape(y, dims).tobytes() == x.tobytes()


def test_reshape_rejects_count_change():
    with pytest.raises(ValueError):
        reshape(np.zeros(6), [4])
