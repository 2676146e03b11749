import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agilecl import tensor as T
from agilecl.tensor import Parameter, Tensor

from conftest import central_difference, rel_error


def grad_of(loss_fn, *leaves):
    for p in leaves:
        p.grad = None
    T.backward(loss_fn())
    return [p.grad.copy() for p in leaves]


def fd_of(loss_fn, *leaves, h=1e-3):
    def value():
        with T.no_grad():
            return loss_fn().item()
    return central_difference(value, [p.data for p in leaves], h=h)


# ------------------------------------------------------------------- matmul

def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal((a @ Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_hand_arithmetic():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).item() == 11.0


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = Parameter(rng.standard_normal((3, 4)))
    b = Parameter(rng.standard_normal((4, 2)))
    w = Tensor(rng.standard_normal((3, 2)))
    fn = lambda: T.sum_all(T.ewise_mul(T.matmul(a, b), w))
    for g, f in zip(grad_of(fn, a, b), fd_of(fn, a, b)):
        assert rel_error(g, f) < 1e-6


# -------------------------------------------------------- broadcast / ewise

def test_broadcast_mul_examples():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.broadcast_mul(a, Tensor([[1, 1]])).data, a.data)
    np.testing.assert_array_equal(T.broadcast_mul(a, Tensor([[0, 2]])).data, [[0, 4], [0, 8]])


def test_broadcast_mul_column_mismatch():
    with pytest.raises(ValueError):
        T.broadcast_mul(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 2))))
    with pytest.raises(ValueError):
        T.broadcast_mul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_broadcast_mul_grad_is_column_sums():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((4, 3)))
    v = Parameter(rng.standard_normal((1, 3)))
    (g,) = grad_of(lambda: T.sum_all(T.broadcast_mul(a, v)), v)
    np.testing.assert_allclose(g, a.data.sum(axis=0, keepdims=True), rtol=1e-12)
    (f,) = fd_of(lambda: T.sum_all(T.broadcast_mul(a, v)), v)
    assert rel_error(g, f) < 1e-6


def test_ewise_mul_examples_and_gradient():
    a = Tensor([[2, 3]])
    np.testing.assert_array_equal(T.ewise_mul(a, Tensor([[4, 5]])).data, [[8, 15]])
    np.testing.assert_array_equal(T.ewise_mul(a, Tensor(np.ones((1, 2)))).data, a.data)
    with pytest.raises(ValueError):
        T.ewise_mul(a, Tensor(np.ones((2, 2))))
    rng = np.random.default_rng(2)
    p, q = Parameter(rng.standard_normal((3, 3))), Parameter(rng.standard_normal((3, 3)))
    w = Tensor(rng.standard_normal((3, 3)))
    fn = lambda: T.sum_all(T.ewise_mul(T.ewise_mul(p, q), w))
    for g, f in zip(grad_of(fn, p, q), fd_of(fn, p, q)):
        assert rel_error(g, f) < 1e-6


# ----------------------------------------------------------- nonlinearities

def test_sigmoid_values():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    v = T.sigmoid(Tensor(-50.0)).item()
    assert 0.0 < v < 1e-20 and not math.isnan(v)
    big = T.sigmoid(Tensor([[-1e4, 1e4]])).data
    assert np.isfinite(big).all()


def test_sigmoid_gradient():
    rng = np.random.default_rng(3)
    a = Parameter(rng.standard_normal((4, 5)) * 3)
    w = Tensor(rng.standard_normal((4, 5)))
    fn = lambda: T.sum_all(T.ewise_mul(T.sigmoid(a), w))
    assert rel_error(grad_of(fn, a)[0], fd_of(fn, a)[0]) < 1e-6


def test_softmax_rows_examples():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[7.0, 7.0, 7.0]])).data, [[1 / 3] * 3])
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, math.log(3)]])).data, [[0.25, 0.75]],
                               rtol=1e-14)
    out = T.softmax_rows(Tensor([[1e4, -1e4, 0.0], [-1e4, -1e4, -1e4]])).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_softmax_rows_are_distributions(b, n, seed):
    x = np.random.default_rng(seed).standard_normal((b, n)) * 20
    p = T.softmax_rows(Tensor(x)).data
    assert (p >= 0).all() and (p <= 1).all()
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-12


def test_softmax_rows_gradient():
    rng = np.random.default_rng(4)
    a = Parameter(rng.standard_normal((3, 5)))
    w = Tensor(rng.standard_normal((3, 5)))
    fn = lambda: T.sum_all(T.ewise_mul(T.softmax_rows(a), w))
    assert rel_error(grad_of(fn, a)[0], fd_of(fn, a)[0]) < 1e-6


def test_relu_gradient_away_from_kink():
    a = Parameter([[-1.5, 0.5, 2.0]])
    (g,) = grad_of(lambda: T.sum_all(T.relu(a)), a)
    np.testing.assert_array_equal(g, [[0, 1, 1]])


# ------------------------------------------------------------ cross entropy

def test_cross_entropy_uniform_logits():
    assert T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-12)
    assert math.log(4) == pytest.approx(1.386294, abs=1e-6)


def test_cross_entropy_saturated():
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 30.0
    # exact: log(1 + 2 e^-30) ≈ 1.87e-13
    assert T.cross_entropy(Tensor(logits), [1, 2]).item() < 1e-12


def test_cross_entropy_index_error():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((1, 3))), [-1])


def test_cross_entropy_gradient_and_closed_form():
    rng = np.random.default_rng(5)
    a = Parameter(rng.standard_normal((4, 6)))
    y = [0, 5, 2, 2]
    fn = lambda: T.cross_entropy(a, y)
    (g,) = grad_of(fn, a)
    assert rel_error(g, fd_of(fn, a)[0]) < 1e-5
    p = T.softmax_np(a.data)
    p[np.arange(4), y] -= 1
    np.testing.assert_allclose(g, p / 4, rtol=1e-12)


# ------------------------------------------------------------------ concat

def test_concat_cols_examples():
    a = Tensor([[1.0], [2.0]])
    assert T.concat_cols([a]) is a
    np.testing.assert_array_equal(T.concat_cols([a, Tensor([[3.0], [4.0]])]).data, [[1, 3], [2, 4]])
    with pytest.raises(ValueError):
        T.concat_cols([])
    with pytest.raises(ValueError):
        T.concat_cols([a, Tensor([[1.0]])])


def test_concat_cols_routes_ones():
    parts = [Parameter(np.ones((2, k))) for k in (1, 3, 2)]
    grads = grad_of(lambda: T.sum_all(T.concat_cols(parts)), *parts)
    for g, p in zip(grads, parts):
        np.testing.assert_array_equal(g, np.ones(p.shape))


def test_take_rows_and_cols_gradients():
    rng = np.random.default_rng(6)
    a = Parameter(rng.standard_normal((5, 4)))
    w = Tensor(rng.standard_normal((2, 3)))
    fn = lambda: T.sum_all(T.ewise_mul(T.take_cols(T.take_rows(a, 1, 3), 1, 4), w))
    assert rel_error(grad_of(fn, a)[0], fd_of(fn, a)[0]) < 1e-6


# ------------------------------------------------------------ stop gradient

def test_stop_gradient_identity_and_zero_grad():
    a = Parameter([[1.0, -2.0, 3.0]])
    s = T.stop_gradient(a)
    np.testing.assert_array_equal(s.data, a.data)
    assert not s.requires_grad
    loss = T.add(T.sum_all(T.stop_gradient(a)), T.scale(T.sum_all(a), 0.0))
    T.backward(loss)
    np.testing.assert_array_equal(a.grad, 0.0)


def test_stop_gradient_product_gradient_is_a_not_2a():
    rng = np.random.default_rng(7)
    a = Parameter(rng.standard_normal((3, 3)))
    (g,) = grad_of(lambda: T.sum_all(T.ewise_mul(a, T.stop_gradient(a))), a)
    np.testing.assert_allclose(g, a.data, rtol=1e-14)
    # oracle: differentiate sum(a * c) with c frozen at the current value of a
    frozen = a.data.copy()
    (f,) = fd_of(lambda: T.sum_all(T.ewise_mul(a, Tensor(frozen))), a)
    assert rel_error(g, f) < 1e-6


# ---------------------------------------------------------- distance losses

def test_l1_row_distance_examples():
    a = Tensor([[1.0, -1.0]])
    assert T.l1_row_distance(a, a).item() == 0.0
    assert T.l1_row_distance(a, Tensor([[0.0, 0.0]])).item() == 2.0
    with pytest.raises(ValueError):
        T.l1_row_distance(a, Tensor([[1.0]]))


def test_l1_row_distance_gradient_away_from_ties():
    rng = np.random.default_rng(8)
    a = Parameter(rng.standard_normal((4, 5)))
    c = Parameter(a.data + rng.choice([-1, 1], size=(4, 5)) * rng.uniform(0.1, 1, (4, 5)))
    fn = lambda: T.l1_row_distance(a, c)
    for g, f in zip(grad_of(fn, a, c), fd_of(fn, a, c)):
        assert rel_error(g, f) < 1e-5


def test_l1_subgradient_zero_at_ties():
    a = Parameter([[1.0, 2.0]])
    c = Parameter([[1.0, 0.0]])
    (g,) = grad_of(lambda: T.l1_row_distance(a, c), a)
    np.testing.assert_array_equal(g, [[0.0, 1.0]])


def test_squared_row_distance_gradient():
    rng = np.random.default_rng(9)
    a, c = Parameter(rng.standard_normal((3, 4))), Parameter(rng.standard_normal((3, 4)))
    fn = lambda: T.squared_row_distance(a, c)
    for g, f in zip(grad_of(fn, a, c), fd_of(fn, a, c)):
        assert rel_error(g, f) < 1e-6


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    a = Parameter(np.arange(6.0).reshape(2, 3))
    T.backward(T.sum_all(a))
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))


def test_backward_accumulates_without_zeroing():
    a = Parameter([[1.0, 2.0]])
    loss = T.sum_all(T.ewise_mul(a, a))
    T.backward(loss)
    first = a.grad.copy()
    T.backward(loss)
    np.testing.assert_array_equal(a.grad, 2 * first)


def test_backward_rejects_non_scalar():
    a = Parameter([[1.0, 2.0]])
    with pytest.raises(ValueError):
        T.backward(T.scale(a, 2.0))


def test_backward_leaves_unreachable_untouched():
    a, b = Parameter([[1.0]]), Parameter([[2.0]])
    T.scale(b, 3.0)
    T.backward(T.scale(a, 2.0))
    assert b.grad is None
    assert a.grad[0, 0] == 2.0


def test_requires_grad_false_never_accumulates():
    a = Tensor([[1.0, 2.0]])
    p = Parameter([[3.0, 4.0]])
    T.backward(T.sum_all(T.ewise_mul(a, p)))
    assert a.grad is None


def test_no_grad_records_nothing():
    p = Parameter([[1.0]])
    before = len(T.get_tape())
    with T.no_grad():
        out = T.scale(p, 2.0)
    assert len(T.get_tape()) == before and not out.requires_grad


@pytest.mark.parametrize("seed", range(100))
def test_random_composite_gradients(seed):
    """Random shapes up to 8x8 through every differentiable op at once."""
    rng = np.random.default_rng(seed)
    b, n, k = rng.integers(1, 9, size=3)
    x = Parameter(rng.standard_normal((b, n)))
    w = Parameter(rng.standard_normal((n, k)) * 0.5)
    v = Parameter(rng.standard_normal((1, k)))
    c = Parameter(rng.standard_normal((b, k)))
    y = rng.integers(0, 2 * k, size=b)
    target = Tensor(rng.standard_normal((b, k)))

    def fn():
        h = T.sigmoid(T.add_row(T.matmul(x, w), v))
        g = T.broadcast_mul(T.ewise_mul(h, c), v)
        z = T.concat_cols([g, T.softmax_rows(h)])
        return T.add(T.cross_entropy(z, y), T.squared_row_distance(h, target))

    leaves = (x, w, v, c)
    for g, f in zip(grad_of(fn, *leaves), fd_of(fn, *leaves)):
        assert rel_error(g, f) < 1e-4


# --------------------------------------------------------------------- SGD

def test_sgd_step_hand_arithmetic():
    p = Parameter([[1.0]])
    p.grad = np.array([[0.5]])
    T.sgd_step([p], 0.1)
    assert p.data[0, 0] == pytest.approx(0.95, abs=1e-15)
    assert p.grad is None


def test_sgd_step_frozen_bitwise_unchanged():
    p = Parameter(np.random.default_rng(0).standard_normal((3, 3)), frozen=True)
    before = p.data.copy()
    p.grad = np.ones((3, 3))
    T.sgd_step([p], 0.5)
    assert p.data.tobytes() == before.tobytes()


def test_sgd_step_zero_grad_fixed_point():
    p = Parameter([[1.25, -3.0]])
    p.grad = np.zeros((1, 2))
    T.sgd_step([p], 1.0)
    np.testing.assert_array_equal(p.data, [[1.25, -3.0]])


@pytest.mark.parametrize("lr", [0.0, -0.1])
def test_sgd_step_rejects_bad_lr(lr):
    with pytest.raises(ValueError):
        T.sgd_step([], lr)


def test_sgd_step_clears_tape():
    p = Parameter([[1.0]])
    T.backward(T.scale(p, 2.0))
    assert len(T.get_tape()) > 0
    T.sgd_step([p], 0.1)
    assert len(T.get_tape()) == 0


def test_tensor_rank_limit():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 2, 2)))
    assert Tensor(3.0).shape == (1, 1)
    assert Tensor([1.0, 2.0]).shape == (1, 2)
