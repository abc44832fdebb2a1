import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from contnet import ops
from contnet.autograd import ShapeError, Tensor, no_grad
from contnet.gradcheck import grad_check


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- matmul
def test_matmul_identity_leaves_b_unchanged(rng):
    b = rng.standard_normal((3, 2))
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)


def test_matmul_hand_example():
    out = ops.matmul(t64([[1, 2], [3, 4]]), t64([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_sum_gradient_matches_finite_differences(rng):
    b = t64(rng.standard_normal((4, 3)))
    err = grad_check(lambda a: ops.matmul(a, b).sum(), t64(rng.standard_normal((2, 4))))
    assert err < 1e-6


def test_matmul_backward_rules(rng):
    a, b = t64(rng.standard_normal((2, 3)), True), t64(rng.standard_normal((3, 4)), True)
    g = rng.standard_normal((2, 4))
    ops.sum(ops.mul(ops.matmul(a, b), Tensor(g))).backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# ---------------------------------------------------------------- softmax
def test_softmax_constant_slice_is_uniform():
    out = ops.softmax(Tensor(np.full((2, 5), 3.7)), axis=-1)
    np.testing.assert_allclose(out.data, 0.2)


def test_softmax_two_zeros():
    np.testing.assert_array_equal(ops.softmax(t64([0.0, 0.0]), axis=0).data, [0.5, 0.5])


def test_softmax_large_logits_do_not_overflow():
    x = np.array([1000.0, 0.0])
    shifted = np.exp(x - x.max())
    oracle = shifted / shifted.sum()
    out = ops.softmax(t64(x), axis=0).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, oracle)
    np.testing.assert_allclose(out, [1.0, 0.0])


def test_softmax_axis_out_of_range():
    with pytest.raises((ValueError, IndexError)):
        ops.softmax(t64([[1.0, 2.0]]), axis=2)


# ------------------------------------------------------------- layer norm
def test_layer_norm_constant_input_gives_zeros():
    out = ops.layer_norm(t64(np.full((3, 4), 2.5)), t64(np.ones(4)), t64(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_two_values():
    # mean 2, variance 1, so the normalised values are -1 and 1
    out = ops.layer_norm(t64([[1.0, 3.0]]), t64([1.0, 1.0]), t64([0.0, 0.0]), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-10)


def test_layer_norm_moments(rng):
    x = rng.standard_normal((5, 7, 16)) * 3 + 1
    out = ops.layer_norm(t64(x), t64(np.ones(16)), t64(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(-1), 1, atol=1e-4)


# --------------------------------------------------------------- backward
def test_backward_of_sum_is_ones(rng):
    th = t64(rng.standard_normal((2, 3, 4)), True)
    th.sum().backward()
    np.testing.assert_array_equal(th.grad, np.ones((2, 3, 4)))


def test_backward_of_sum_of_squares(rng):
    th = t64(rng.standard_normal((3, 3)), True)
    ops.mul(th, th).sum().backward()
    np.testing.assert_allclose(th.grad, 2 * th.data)


def test_gradient_accumulates_over_reuse(rng):
    th = t64(rng.standard_normal(4), True)
    (th + th).sum().backward()
    np.testing.assert_array_equal(th.grad, np.full(4, 2.0))


def test_gradients_accumulate_across_backward_calls(rng):
    th = t64(rng.standard_normal(4), True)
    th.sum().backward()
    th.sum().backward()
    np.testing.assert_array_equal(th.grad, np.full(4, 2.0))


def test_non_scalar_loss_rejected():
    th = t64(np.ones(3), True)
    with pytest.raises(ValueError):
        (th * 2.0).backward()


def test_no_grad_tensor_never_accumulates(rng):
    a = t64(rng.standard_normal(3), False)
    b = t64(rng.standard_normal(3), True)
    ops.mul(a, b).sum().backward()
    assert a.grad is None and b.grad is not None


def test_no_grad_context_records_nothing():
    th = t64(np.ones(3), True)
    with no_grad():
        out = (th * 3.0).sum()
    assert out._backward is None and not out._parents


def test_tape_replay_after_zeroing_is_identical(rng):
    w = t64(rng.standard_normal((4, 3)), True)
    x = t64(rng.standard_normal((5, 4)))
    target = Tensor(np.arange(15.0).reshape(5, 3))
    out = ops.sum(ops.mul(ops.softmax(ops.matmul(x, w), axis=-1), target))
    out.backward()
    first = w.grad.copy()
    w.grad = None
    out.backward()
    np.testing.assert_array_equal(w.grad, first)


def test_forward_is_deterministic(rng):
    w = rng.standard_normal((6, 6))
    x = rng.standard_normal((3, 6))
    a = ops.softmax(ops.matmul(Tensor(x), Tensor(w)), axis=-1).data
    b = ops.softmax(ops.matmul(Tensor(x), Tensor(w)), axis=-1).data
    assert a.tobytes() == b.tobytes()


def test_grad_matches_data_shape(rng):
    th = t64(rng.standard_normal((2, 5)), True)
    ops.mean(th, axis=0).sum().backward()
    assert th.grad.shape == th.shape


# -------------------------------------------------------------- broadcasting
def test_leading_batch_and_scalar_broadcast_allowed(rng):
    a = t64(rng.standard_normal((2, 3, 4)), True)
    b = t64(rng.standard_normal(4), True)
    s = t64(2.0, True)
    ops.add(ops.add(a, b), s).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 6.0))
    assert s.grad == pytest.approx(24.0)


def test_other_broadcasting_is_a_shape_error():
    with pytest.raises(ShapeError):
        ops.add(t64(np.ones((3, 4))), t64(np.ones((3, 1))))


def test_divide_by_tensor_is_rejected():
    with pytest.raises(TypeError):
        t64([1.0]) / t64([2.0])


# ---------------------------------------------------------------- grad_check
def test_grad_check_sum_of_squares(rng):
    assert grad_check(lambda x: ops.mul(x, x).sum(), t64(rng.standard_normal((3, 4)))) < 1e-8


def test_grad_check_softmax_cross_entropy(rng):
    labels = rng.integers(0, 5, size=4)
    onehot = np.eye(5)[labels]

    def ce(x):
        return ops.sum(ops.mul(ops.log_softmax(x, axis=-1), Tensor(-onehot)))

    assert grad_check(ce, t64(rng.standard_normal((4, 5)))) < 1e-6


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        grad_check(lambda x: x.sum(), Tensor(np.ones(3, dtype=np.float32)))


_shapes = hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=3)


@given(st.data())
def test_elementwise_and_reduction_gradients_property(data):
    shape = data.draw(_shapes)
    seed = data.draw(st.integers(0, 10_000))
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal(shape))
    other = Tensor(rng.standard_normal(shape))
    axis = data.draw(st.integers(0, len(shape) - 1))
    fns = [
        lambda x: ops.sum(ops.mul(ops.mul(x, other), w)),
        lambda x: ops.sum(ops.mul(ops.softmax(x, axis=axis), w)),
        lambda x: ops.sum(ops.mul(ops.log_softmax(x, axis=axis), w)),
        lambda x: ops.sum(ops.mean(ops.mul(x, w), axis=axis)),
        lambda x: ops.sum(ops.mul(ops.transpose(x, None), ops.transpose(w, None))),
    ]
    for f in fns:
        assert grad_check(f, t64(rng.standard_normal(shape))) < 1e-4


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_matmul_gradient_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    b = t64(rng.standard_normal((k, n)))
    w = Tensor(rng.standard_normal((m, n)))
    assert grad_check(lambda a: ops.sum(ops.mul(ops.matmul(a, b), w)), t64(rng.standard_normal((m, k)))) < 1e-4


# C >= 3: with two channels the normalised output is +-1 and the true gradient is ~eps-sized
@given(st.integers(3, 6), st.integers(0, 10_000))
def test_layer_norm_gradient_property(c, seed):
    rng = np.random.default_rng(seed)
    g, b = t64(rng.standard_normal(c)), t64(rng.standard_normal(c))
    w = Tensor(rng.standard_normal((3, c)))
    f = lambda x: ops.sum(ops.mul(ops.layer_norm(x, g, b), w))  # noqa: E731
    assert grad_check(f, t64(rng.standard_normal((3, c)))) < 1e-4
