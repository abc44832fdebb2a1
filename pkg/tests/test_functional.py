import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contnet import functional as F
from contnet import ops
from contnet.autograd import ShapeError, Tensor
from contnet.gradcheck import grad_check
from contnet.module import BatchNorm2d, Conv2d, SeparableConv2d


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def conv_loops(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct summation over every output position, kernel tap and input channel."""
    n, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oc in range(o):
            gi = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(cg):
                        for a in range(k):
                            for bb in range(k):
                                acc += w[oc, ic, a, bb] * xp[ni, gi * cg + ic, i * stride + a, j * stride + bb]
                    out[ni, oc, i, j] = acc + (b[oc] if b is not None else 0.0)
    return out


# ---------------------------------------------------------------- conv2d
def test_conv_1x1_unit_weight_is_identity(rng):
    x = rng.standard_normal((2, 1, 5, 5))
    out = F.conv2d(t64(x), t64(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_3x3_padding_1():
    out = F.conv2d(t64(np.ones((1, 1, 4, 4))), t64(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]])
    np.testing.assert_array_equal(out, expected)


def test_conv_3x3_parameter_count_is_9c2():
    assert Conv2d(64, 64, 3, padding=1).weight.size == 36_864 == 9 * 64 ** 2


@pytest.mark.parametrize("stride,padding,groups", [(1, 0, 1), (1, 1, 2), (2, 1, 1), (2, 0, 4), (1, 1, 4)])
def test_conv_matches_direct_summation(rng, stride, padding, groups):
    x = rng.standard_normal((2, 4, 6, 5))
    w = rng.standard_normal((8, 4 // groups, 3, 3))
    b = rng.standard_normal(8)
    out = F.conv2d(t64(x), t64(w), t64(b), stride, padding, groups).data
    np.testing.assert_allclose(out, conv_loops(x, w, b, stride, padding, groups), atol=1e-12)


def test_conv_output_size_formula(rng):
    out = F.conv2d(t64(rng.standard_normal((1, 2, 11, 9))), t64(rng.standard_normal((3, 2, 3, 3))), None, 2, 1)
    assert out.shape == (1, 3, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


@pytest.mark.parametrize("g", [1, 4, 8, 16])
def test_grouped_conv_equals_independent_convs(rng, g):
    c = 16
    x = rng.standard_normal((2, c, 6, 6))
    w = rng.standard_normal((c, c // g, 3, 3))
    grouped = F.conv2d(t64(x), t64(w), None, 1, 1, groups=g).data
    cg = c // g
    parts = [F.conv2d(t64(x[:, i * cg:(i + 1) * cg]), t64(w[i * cg:(i + 1) * cg]), None, 1, 1).data
             for i in range(g)]
    np.testing.assert_allclose(grouped, np.concatenate(parts, axis=1), atol=1e-12)


def test_group_divisibility_error():
    with pytest.raises(ShapeError, match="groups"):
        F.conv2d(t64(np.zeros((1, 6, 4, 4))), t64(np.zeros((4, 2, 3, 3))), groups=4)


def test_channel_mismatch_error():
    with pytest.raises(ShapeError, match="channels"):
        F.conv2d(t64(np.zeros((1, 3, 4, 4))), t64(np.zeros((4, 2, 3, 3))))


@pytest.mark.parametrize("c", [2, 8, 64])
def test_separable_conv_parameter_count(c):
    sep = SeparableConv2d(c, c, 3, padding=1)
    n = sum(p.size for p in sep.parameters())
    assert n == 9 * c + c * c
    assert n < 9 * c * c


def test_conv_translation_equivariance_on_interior(rng):
    x = rng.standard_normal((1, 3, 10, 10))
    w = t64(rng.standard_normal((2, 3, 3, 3)))
    shifted = np.roll(x, 1, axis=3)
    a = F.conv2d(t64(x), w).data
    b = F.conv2d(t64(shifted), w).data
    # valid conv: output column j+1 of the shifted input sees the same pixels as column j
    np.testing.assert_allclose(b[..., 1:], a[..., :-1], atol=1e-12)


@pytest.mark.parametrize("stride,padding,groups", [(1, 1, 1), (2, 1, 2), (1, 0, 4)])
def test_conv_gradients(rng, stride, padding, groups):
    w = t64(rng.standard_normal((4, 4 // groups, 3, 3)))
    proj = Tensor(rng.standard_normal(F.conv2d(t64(np.zeros((2, 4, 5, 5))), w, None, stride, padding,
                                               groups).shape))
    x = t64(rng.standard_normal((2, 4, 5, 5)))
    assert grad_check(lambda v: ops.sum(ops.mul(F.conv2d(v, w, None, stride, padding, groups), proj)), x) < 1e-6
    xin = t64(rng.standard_normal((2, 4, 5, 5)))
    assert grad_check(lambda v: ops.sum(ops.mul(F.conv2d(xin, v, None, stride, padding, groups), proj)),
                      t64(w.data.copy())) < 1e-6


# ---------------------------------------------------------------- pooling
def test_max_pool_constant():
    out = F.pool2d(t64(np.full((1, 2, 6, 6), 3.0)), "max", 3, 2, 1)
    np.testing.assert_array_equal(out.data, 3.0)


def test_stem_pool_shape():
    assert F.pool2d(Tensor(np.zeros((1, 1, 112, 112))), "max", 3, 2, 1).shape == (1, 1, 56, 56)


def test_avg_pool_equals_uniform_conv(rng):
    x = rng.standard_normal((2, 3, 7, 7))
    k = 3
    w = np.zeros((3, 1, k, k)) + 1.0 / k ** 2
    pooled = F.pool2d(t64(x), "avg", k, 2, 1).data
    conv = F.conv2d(t64(x), t64(w), None, 2, 1, groups=3).data
    np.testing.assert_allclose(pooled, conv, atol=1e-12)


def test_max_pool_ties_route_to_first_index():
    x = t64(np.ones((1, 1, 2, 2)), True)
    F.pool2d(x, "max", 2, 2).sum().backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_pool_window_too_large():
    with pytest.raises(ShapeError):
        F.pool2d(t64(np.zeros((1, 1, 2, 2))), "max", 5, 1)


def test_pool_gradients(rng):
    for kind in ("max", "avg"):
        proj = Tensor(rng.standard_normal((1, 2, 3, 3)))
        f = lambda v: ops.sum(ops.mul(F.pool2d(v, kind, 3, 2, 1), proj))  # noqa: E731
        assert grad_check(f, t64(rng.standard_normal((1, 2, 6, 6)))) < 1e-6


# ------------------------------------------------------- global average pool
def test_gap_constant():
    np.testing.assert_array_equal(F.global_avg_pool(t64(np.full((2, 3, 4, 5), 1.5))).data, 1.5)


def test_gap_of_one_to_49():
    x = np.arange(1, 50, dtype=np.float64).reshape(1, 1, 7, 7)
    assert F.global_avg_pool(t64(x)).data[0, 0] == pytest.approx(sum(range(1, 50)) / 49, rel=1e-12)


def test_gap_gradient_is_uniform():
    x = t64(np.zeros((1, 2, 4, 4)), True)
    F.global_avg_pool(x).sum().backward()
    np.testing.assert_allclose(x.grad, 1 / 16)


# ------------------------------------------------------------- batch norm
def test_batch_norm_infer_identity(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    out = F.batch_norm(t64(x), t64(np.ones(3)), t64(np.zeros(3)), np.zeros(3), np.ones(3), training=False)
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5))


def test_batch_norm_train_moments(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 4 + 2
    out = F.batch_norm(t64(x), t64(np.ones(3)), t64(np.zeros(3)), np.zeros(3), np.ones(3), training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_batch_norm_running_update_closed_form(rng):
    x = rng.standard_normal((4, 2, 3, 3)) + 5
    m = 0.1
    init_mean, init_var = np.array([0.5, -1.0]), np.array([2.0, 0.5])
    rm, rv = init_mean.copy(), init_var.copy()
    F.batch_norm(t64(x), t64(np.ones(2)), t64(np.zeros(2)), rm, rv, training=True, momentum=m)
    flat = x.transpose(1, 0, 2, 3).reshape(2, -1)
    np.testing.assert_allclose(rm, (1 - m) * init_mean + m * flat.mean(1))
    np.testing.assert_allclose(rv, (1 - m) * init_var + m * flat.var(1, ddof=1))
    assert np.all(rv > 0)


def test_batch_norm_singleton_statistics_rejected():
    with pytest.raises(ValueError):
        F.batch_norm(t64(np.zeros((1, 2, 1, 1))), t64(np.ones(2)), t64(np.zeros(2)), np.zeros(2), np.ones(2),
                     training=True)


def test_batch_norm_module_modes(rng):
    bn = BatchNorm2d(3, dtype=np.float64)
    x = t64(rng.standard_normal((4, 3, 2, 2)))
    bn(x)
    assert not np.allclose(bn.running_mean, 0)
    bn.eval()
    before = bn.running_mean.copy()
    bn(x)
    np.testing.assert_array_equal(bn.running_mean, before)


# ----------------------------------------------------------------- linear
def test_linear_identity(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(F.linear(t64(x), t64(np.eye(4)), t64(np.zeros(4))).data, x)


def test_linear_matches_flattened_matmul(rng):
    x = rng.standard_normal((2, 3, 5))
    w, b = rng.standard_normal((5, 4)), rng.standard_normal(4)
    out = F.linear(t64(x), t64(w), t64(b)).data
    np.testing.assert_allclose(out.reshape(6, 4), x.reshape(6, 5) @ w + b)


def test_linear_gradient(rng):
    w, b = t64(rng.standard_normal((5, 4))), t64(rng.standard_normal(4))
    proj = Tensor(rng.standard_normal((3, 4)))
    assert grad_check(lambda v: ops.sum(ops.mul(F.linear(v, w, b), proj)), t64(rng.standard_normal((3, 5)))) < 1e-6
    x = t64(rng.standard_normal((3, 5)))
    assert grad_check(lambda v: ops.sum(ops.mul(F.linear(x, v, b), proj)), t64(w.data.copy())) < 1e-6


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        F.linear(t64(np.zeros((2, 3))), t64(np.zeros((4, 2))))


@given(st.integers(1, 3), st.integers(1, 2), st.sampled_from([1, 3]), st.integers(0, 1), st.integers(0, 999))
def test_conv_matches_loops_property(c_mult, stride, k, padding, seed):
    rng = np.random.default_rng(seed)
    groups = c_mult
    c = 2 * c_mult
    x = rng.standard_normal((1, c, 5, 4))
    w = rng.standard_normal((c, c // groups, k, k))
    out = F.conv2d(t64(x), t64(w), None, stride, padding, groups).data
    np.testing.assert_allclose(out, conv_loops(x, w, None, stride, padding, groups), atol=1e-10)
