import numpy as np
import pytest
from hypothesis import given, strategies as st

from veloxnet import tensor as T
from veloxnet.errors import DimensionError, NumericError


def _triple_loop(a, b):
    m, k = a.shape
    p = b.shape[1]
    out = np.zeros((m, p), dtype=a.dtype)
    for i in range(m):
        for j in range(p):
            out[i, j] = sum(a[i, t] * b[t, j] for t in range(k))
    return out


def test_matmul_identity():
    b = T.tensor([[3, 4], [5, 6]])
    np.testing.assert_array_equal(T.matmul(T.tensor(np.eye(2)), b), b)


def test_matmul_hand_example():
    a = T.tensor([[1, 2], [3, 4]], np.float64)
    b = T.tensor([[5, 6], [7, 8]], np.float64)
    np.testing.assert_array_equal(T.matmul(a, b), [[19, 22], [43, 50]])
    np.testing.assert_array_equal(T.matmul(a, b), _triple_loop(a, b))


def test_matmul_zero_annihilates(rng):
    out = T.matmul(np.zeros((3, 5), np.float32), rng.random((5, 2)).astype(np.float32))
    np.testing.assert_array_equal(out, np.zeros((3, 2)))


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_matmul_matches_loop_oracle(m, k, p, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((m, k)), r.standard_normal((k, p))
    np.testing.assert_allclose(T.matmul(a, b), _triple_loop(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_errors():
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 3), np.float32), np.ones((3, 2), np.float64))
    with pytest.raises(DimensionError):
        T.matmul(np.ones(3), np.ones((3, 2)))


def test_elementwise():
    a = T.tensor([1, 2, 3])
    np.testing.assert_array_equal(T.elementwise("mul", a, T.tensor([4, 5, 6])), [4, 10, 18])
    np.testing.assert_array_equal(T.elementwise("mul", a, np.ones_like(a)), a)
    np.testing.assert_array_equal(T.elementwise("add", a, np.zeros_like(a)), a)
    np.testing.assert_array_equal(T.elementwise("sub", a, a), np.zeros(3))
    with pytest.raises(DimensionError):
        T.elementwise("add", a, T.tensor([1, 2]))
    with pytest.raises(ValueError):
        T.elementwise("div", a, a)


def test_elementwise_non_finite_is_error():
    big = T.tensor([3e38])
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        T.elementwise("add", big, big)


def test_split_example():
    t = T.tensor([[1, 2, 3, 4], [5, 6, 7, 8]])
    a, b = T.split_channels(t)
    np.testing.assert_array_equal(a, [[1, 2], [5, 6]])
    np.testing.assert_array_equal(b, [[3, 4], [7, 8]])
    with pytest.raises(DimensionError):
        T.split_channels(T.tensor([[1, 2, 3]]))


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31))
def test_split_concat_roundtrip(n, half, seed):
    t = np.random.default_rng(seed).standard_normal((n, 2 * half)).astype(np.float32)
    out = T.concat_channels(*T.split_channels(t))
    assert out.tobytes() == t.tobytes()


def test_tensor_validation():
    with pytest.raises(DimensionError):
        T.tensor(np.ones((1, 1, 1, 1, 1)))
    with pytest.raises(DimensionError):
        T.tensor(np.ones((0, 2)))
    with pytest.raises(NumericError):
        T.tensor([1.0, np.nan])
    x = T.tensor(np.arange(2 * 3 * 4 * 5).reshape(2, 3, 4, 5))
    # row-major index formula
    n, c, h, w = 1, 2, 3, 4
    assert x.reshape(-1)[((n * 3 + c) * 4 + h) * 5 + w] == x[n, c, h, w]


def test_reduce():
    t = T.tensor([[1, 3, 3], [2, 0, 1]])
    np.testing.assert_array_equal(T.reduce("sum", t, 1), [7, 3])
    np.testing.assert_array_equal(T.reduce("mean", t, 0), [1.5, 1.5, 2])
    vals, idx = T.reduce("max_with_argmax", t, 1)
    np.testing.assert_array_equal(vals, [3, 2])
    np.testing.assert_array_equal(idx, [1, 0])  # tie resolves to the lower index
    with pytest.raises(DimensionError):
        T.reduce("sum", t, 2)
