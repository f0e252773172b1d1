import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stackvs import tensor as T
from stackvs.errors import NumericError, ShapeError
from stackvs.tensor import Tape, Tensor, backward, grad_check


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for q in range(k):
                s += a[i][q] * b[q][j]
            out[i][j] = s
    return out


# matmul

def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[5.0], [7.0]]))
    assert out.value.tolist() == [[5.0], [7.0]]


def test_matmul_small_oracle():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.value.tolist() == naive_matmul([[1, 2], [3, 4]], [[1], [1]]) == [[3.0], [7.0]]


def test_matmul_random_matches_triple_loop_exactly():
    rng = np.random.default_rng(3)
    # integer-valued entries: every partial sum is exact, so no rounding order matters
    a, b = rng.integers(-9, 10, size=(3, 2)).astype(float), rng.integers(-9, 10, size=(2, 4)).astype(float)
    assert T.matmul(Tensor(a), Tensor(b)).value.tolist() == naive_matmul(a.tolist(), b.tolist())


def test_matmul_random_normal_within_ulps():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(2, 4))
    # BLAS may fuse multiply-add, which differs from the loop in the last bit
    want = np.array(naive_matmul(a.tolist(), b.tolist()))
    got = T.matmul(Tensor(a), Tensor(b)).value
    assert np.all(np.abs(got - want) <= 4 * np.spacing(np.abs(want) + np.abs(a) @ np.abs(b)))


def test_matmul_shape_mismatch_reports_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# softmax

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).value, [1 / 3] * 3, atol=1e-15)


def test_softmax_log_values():
    out = T.softmax(Tensor([math.log(1), math.log(2), math.log(3)])).value
    np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_large_logits_stable():
    out = T.softmax(Tensor([1000.0, 1000.0])).value
    assert out.tolist() == [0.5, 0.5]


def test_softmax_empty_rejected():
    with pytest.raises(ShapeError):
        T.softmax(Tensor(np.zeros(0)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_simplex_and_shift_invariance(x, c):
    y = T.softmax(Tensor(x)).value
    assert y.min() >= 0 and abs(y.sum() - 1) <= 1e-12
    np.testing.assert_allclose(T.softmax(Tensor(x + c)).value, y, atol=1e-12)


# backward

def test_backward_sum_gives_ones():
    tape = Tape()
    x = tape.leaf(np.arange(6.0).reshape(2, 3))
    g = backward(tape, T.sum(x))
    assert g[x].tolist() == np.ones((2, 3)).tolist()


def test_backward_quadratic():
    tape = Tape()
    xv = np.array([1.5, -2.0, 0.25])
    x = tape.leaf(xv)
    g = backward(tape, T.scale(T.sum(T.mul(x, x)), 0.5))
    np.testing.assert_array_equal(g[x], xv)


def test_backward_unreachable_node_is_zero_and_shaped():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    y = tape.leaf(np.ones((2, 2)))
    g = backward(tape, T.sum(x))
    assert g[y].shape == (2, 2) and not g[y].any()


def test_backward_nonscalar_rejected():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        backward(tape, T.tanh(x))


def test_backward_xe_softmax_matches_central_differences():
    rng = np.random.default_rng(0)
    W, x, y = rng.normal(size=(5, 4)), rng.normal(size=(4, 1)), 2

    def f(p):
        logits = T.reshape(T.matmul(p["W"], Tensor(x)), (5,))
        return T.nll_gather(T.softmax(logits), [y])

    # independent oracle: closed-form gradient (softmax - onehot) x^T
    z = (W @ x).ravel()
    s = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    s[y] -= 1.0
    closed = np.outer(s, x.ravel())
    tape = Tape()
    p = tape.parameters({"W": W})
    np.testing.assert_allclose(backward(tape, f(p))[p["W"]], closed, rtol=1e-12, atol=1e-14)
    assert grad_check(f, {"W": W}) < 1e-6


def test_backward_deterministic():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 3))

    def run():
        tape = Tape()
        x = tape.leaf(a)
        return backward(tape, T.sum(T.tanh(T.matmul(x, x))))[x]

    assert run().tobytes() == run().tobytes()


# grad_check

def test_grad_check_quadratic():
    x = np.random.default_rng(2).normal(size=(4, 3))
    assert grad_check(lambda p: T.scale(T.sum(T.mul(p["x"], p["x"])), 0.5), {"x": x}, 1e-5) < 1e-8


def test_grad_check_detects_doubled_gradient():
    x = np.random.default_rng(2).normal(size=5) + 3.0
    f = lambda p: T.scale(T.sum(T.mul(p["x"], p["x"])), 0.5)  # noqa: E731
    with T.corrupt_gradient("mul", 2.0):
        err = grad_check(f, {"x": x})
    # |2d - d| / max(|2d|, |d|) = 1/2 under the max-denominator definition
    assert err > 0.1
    assert err == pytest.approx(0.5, abs=1e-6)


def test_grad_check_eps_range():
    with pytest.raises(ValueError):
        grad_check(lambda p: T.sum(p["x"]), {"x": np.ones(2)}, eps=1e-2)


def test_grad_check_reports_nan_coordinate():
    def f(p):
        v = p["x"].value
        if v[1] > 0.5:
            return T.scale(T.sum(p["x"]), float("nan"))
        return T.sum(p["x"])

    with pytest.raises(NumericError, match=r"x\[1\]"):
        grad_check(f, {"x": np.array([0.0, 0.5])}, eps=1e-4)


def test_log_clamps_and_rejects_negative():
    assert T.log(Tensor([0.0])).value[0] == pytest.approx(math.log(1e-300))
    with pytest.raises(NumericError):
        T.log(Tensor([-1.0]))


def test_values_flat_view():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.values.tolist() == [0, 1, 2, 3, 4, 5]
    assert math.prod(t.shape) == t.values.size


def test_nll_gather_weighted():
    p = Tensor([[0.5, 0.5], [0.25, 0.75]])
    out = T.nll_gather(p, [0, 1], [2.0, 0.0])
    assert out.value == pytest.approx(-2.0 * math.log(0.5))
