import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branchmpc.scan import associative_scan


def matmul_op(a, b):
    return (b[0] @ a[0],)


def add_op(a, b):
    return (a[0] + b[0],)


@pytest.mark.parametrize("n", [1, 2, 3, 7, 8, 33])
@pytest.mark.parametrize("method", ["blelloch", "sequential"])
def test_prefix_sums(n, method):
    x = np.arange(n, dtype=float)
    (out,) = associative_scan(add_op, (x,), method=method)
    np.testing.assert_allclose(out, np.cumsum(x))
    (rev,) = associative_scan(add_op, (x,), reverse=True, method=method)
    np.testing.assert_allclose(rev, np.cumsum(x[::-1])[::-1])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_noncommutative_products_match_fold(n, seed):
    rng = np.random.default_rng(seed)
    mats = rng.standard_normal((n, 3, 3)) / 2
    (fwd,) = associative_scan(matmul_op, (mats,))
    (rev,) = associative_scan(matmul_op, (mats,), reverse=True)
    acc = np.eye(3)
    for t in range(n):
        acc = mats[t] @ acc
        np.testing.assert_allclose(fwd[t], acc, atol=1e-12)
    acc = np.eye(3)
    for t in range(n - 1, -1, -1):
        acc = acc @ mats[t]
        np.testing.assert_allclose(rev[t], acc, atol=1e-12)


def test_batch_axes_are_independent():
    rng = np.random.default_rng(1)
    mats = rng.standard_normal((9, 4, 2, 2))
    (both,) = associative_scan(matmul_op, (mats,))
    for b in range(4):
        (one,) = associative_scan(matmul_op, (mats[:, b],))
        np.testing.assert_allclose(both[:, b], one)


def test_unknown_method():
    with pytest.raises(ValueError, match="unknown scan method"):
        associative_scan(add_op, (np.ones(3),), method="hillis")
