import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dat import tensor as T
from dat.gradcheck import finite_difference_check, kink_mask
from dat.tensor import GraphError, Tensor

TOL = 1e-4


def rand(rng, *shape):
    return rng.standard_normal(shape)


def conv_oracle(x, k, b, stride, padding):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for s in range(wo):
                    patch = xp[i, :, r * stride:r * stride + kh, s * stride:s * stride + kw]
                    out[i, o, r, s] = np.sum(patch * k[o]) + b[o]
    return out


# -- conv ----------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x)


def test_conv_constant_sum():
    x = np.full((1, 1, 6, 6), 0.75)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 4, 4)
    assert np.allclose(out.data, 9 * 0.75)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(7)
    x, k, b = rand(rng, 2, 3, 5, 5), rand(rng, 4, 3, 3, 3), rand(rng, 4)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, padding)
    np.testing.assert_allclose(out.data, conv_oracle(x, k, b, stride, padding), rtol=1e-12, atol=1e-12)


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3, 5, 5\).*\(4, 2, 3, 3\)"):
        T.conv2d(Tensor(np.zeros((2, 3, 5, 5))), Tensor(np.zeros((4, 2, 3, 3))))


def test_conv_kernel_too_large():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 0)])
def test_conv_gradients(stride, padding):
    rng = np.random.default_rng(1)
    x, k, b = rand(rng, 2, 2, 5, 5), rand(rng, 3, 2, 3, 3), rand(rng, 3)
    w = rand(rng, *T.conv2d(Tensor(x), Tensor(k), None, stride, padding).shape)

    def via(which):
        def f(t):
            args = {"x": Tensor(x), "k": Tensor(k), "b": Tensor(b)}
            args[which] = t
            return T.sum_(T.mul(T.conv2d(args["x"], args["k"], args["b"], stride, padding), Tensor(w)))
        return f

    assert finite_difference_check(via("x"), x) < TOL
    assert finite_difference_check(via("k"), k) < TOL
    assert finite_difference_check(via("b"), b) < TOL


# -- batch norm ------------------------------------------------------------------

def test_batch_norm_statistics_oracle():
    rng = np.random.default_rng(3)
    x = rand(rng, 8, 4, 6, 6) * 2 + 1
    out, mu, var = T.batch_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(mu, x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(var, x.var(axis=(0, 2, 3)), rtol=1e-12)
    assert out.shape == x.shape


def test_batch_norm_normalized_input_passes_through():
    rng = np.random.default_rng(4)
    x = rand(rng, 8, 3, 4, 4)
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out, _, _ = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-5)
    # 1/sqrt(1 + eps) shrinks values by eps/2 relative
    np.testing.assert_allclose(out.data, x, rtol=1e-5 / 2 + 1e-9)


def test_batch_norm_zero_gamma_gives_beta():
    x = np.random.default_rng(5).standard_normal((4, 2, 3, 3))
    beta = np.array([0.5, -2.0])
    out, _, _ = T.batch_norm(Tensor(x), Tensor(np.zeros(2)), Tensor(beta))
    assert np.array_equal(out.data, np.broadcast_to(beta.reshape(1, 2, 1, 1), x.shape))


def test_batch_norm_running_stats_and_eval():
    x = np.random.default_rng(6).standard_normal((4, 2, 3, 3)) + 3
    rm, rv = np.zeros(2), np.ones(2)
    _, mu, var = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, "train", 0.1)
    m = 4 * 9
    np.testing.assert_allclose(rm, 0.1 * mu)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var * m / (m - 1))
    out, bm, bv = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, "eval")
    assert bm is None and bv is None
    np.testing.assert_allclose(out.data, (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5))


def test_batch_norm_stats_mode_leaves_running_stats():
    x = np.random.default_rng(6).standard_normal((4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, "stats")
    assert np.array_equal(rm, np.zeros(2)) and np.array_equal(rv, np.ones(2))


def test_batch_norm_rejects_single_value_per_channel():
    with pytest.raises(ValueError, match="N\\*H\\*W >= 2"):
        T.batch_norm(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_batch_norm_gradients():
    rng = np.random.default_rng(8)
    x, g, b = rand(rng, 3, 2, 3, 3), rand(rng, 2), rand(rng, 2)
    w = rand(rng, 3, 2, 3, 3)

    def loss(xt, gt, bt):
        return T.sum_(T.mul(T.batch_norm(xt, gt, bt)[0], Tensor(w)))

    assert finite_difference_check(lambda t: loss(t, Tensor(g), Tensor(b)), x) < TOL
    assert finite_difference_check(lambda t: loss(Tensor(x), t, Tensor(b)), g) < TOL
    assert finite_difference_check(lambda t: loss(Tensor(x), Tensor(g), t), b) < TOL


# -- cross entropy -----------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((3, 10))), np.array([0, 4, 9]))
    assert loss.item() == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_saturated():
    logits = np.zeros((2, 5))
    logits[[0, 1], [2, 3]] = 1000.0
    loss = T.softmax_cross_entropy(Tensor(logits), np.array([2, 3]))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_log_sum_exp_oracle():
    rng = np.random.default_rng(9)
    logits = rand(rng, 4, 7) * 3
    labels = np.array([0, 6, 3, 3])
    expected = np.mean([math.log(sum(math.exp(v) for v in row)) - row[j] for row, j in zip(logits, labels)])
    assert T.softmax_cross_entropy(Tensor(logits), labels).item() == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(10)
    logits, labels = rand(rng, 4, 5), np.array([1, 0, 4, 2])
    t = Tensor(logits, requires_grad=True)
    T.softmax_cross_entropy(t, labels).backward()
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    p[np.arange(4), labels] -= 1
    np.testing.assert_allclose(t.grad, p / 4, rtol=1e-10)


def test_cross_entropy_sum_reduction():
    rng = np.random.default_rng(10)
    logits, labels = rand(rng, 4, 5), np.array([1, 0, 4, 2])
    mean = T.softmax_cross_entropy(Tensor(logits), labels).item()
    total = T.softmax_cross_entropy(Tensor(logits), labels, reduction="sum").item()
    assert total == pytest.approx(4 * mean)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError, match="out of range"):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


# -- stop gradient / straight through -------------------------------------------------

def test_stop_gradient_product():
    x = np.array([1.5, -2.0, 3.0])
    t = Tensor(x, requires_grad=True)
    T.sum_(T.mul(T.stop_gradient(t), t)).backward()
    assert np.array_equal(t.grad, x)


def test_stop_gradient_fully_stopped_checker_mismatch():
    x = np.array([0.3, -1.2])
    res = finite_difference_check(lambda t: T.sum_(T.add(T.stop_gradient(t), 0.0)), x, expect_mismatch=True)
    assert np.array_equal(res.analytic, np.zeros(2))
    np.testing.assert_allclose(res.numeric, np.ones(2), rtol=1e-6)
    assert res.max_rel_error == pytest.approx(1.0)


def test_straight_through_identity_when_equal():
    v = np.array([[0.1, 0.2], [0.3, 0.4]])
    t = Tensor(v, requires_grad=True)
    out = T.straight_through(t, v.copy())
    assert np.array_equal(out.data, v)
    g = np.array([[1.0, -2.0], [3.0, 0.5]])
    out.backward(g)
    assert np.array_equal(t.grad, g)


def test_straight_through_square():
    v = np.array([0.2, -0.7, 1.1])
    vq = np.array([0.0, -1.0, 1.0])
    t = Tensor(v, requires_grad=True)
    T.sum_(T.square(T.straight_through(t, vq))).backward()
    assert np.array_equal(t.grad, 2 * vq)


def test_straight_through_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        T.straight_through(Tensor(np.zeros(3), requires_grad=True), np.zeros(4))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_straight_through_bitwise_contract(n, m, seed):
    rng = np.random.default_rng(seed)
    v, q, g = rng.standard_normal((n, m)), rng.standard_normal((n, m)), rng.standard_normal((n, m))
    t = Tensor(v.astype(np.float32), requires_grad=True)
    out = T.straight_through(t, q.astype(np.float32))
    assert np.array_equal(out.data, q.astype(np.float32))
    (gv,) = T.grad(out, [t], g.astype(np.float32))
    assert np.array_equal(gv, g.astype(np.float32))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_stop_gradient_cuts_every_path(seed):
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.standard_normal(4), requires_grad=True), Tensor(rng.standard_normal(4), requires_grad=True)
    stopped = T.stop_gradient(T.mul(a, a))
    out = T.sum_(T.add(T.relu(stopped), T.mul(stopped, b)))
    ga, gb = T.grad(out, [a, b])
    assert np.array_equal(ga, np.zeros(4))
    np.testing.assert_allclose(gb, a.data * a.data)


# -- remaining primitives ------------------------------------------------------------

def _away_from(points, x, margin=1e-3):
    return kink_mask(x, points, margin)


PRIMITIVES = {
    "add": (lambda t, w: T.sum_(T.mul(T.add(t, w), w)), None),
    "sub": (lambda t, w: T.sum_(T.mul(T.sub(w, t), w)), None),
    "mul": (lambda t, w: T.sum_(T.mul(T.mul(t, t), w)), None),
    "scale": (lambda t, w: T.sum_(T.mul(T.scale(t, -2.5), w)), None),
    "square": (lambda t, w: T.sum_(T.mul(T.square(t), w)), None),
    "relu": (lambda t, w: T.sum_(T.mul(T.relu(t), w)), (0.0,)),
    "clamp": (lambda t, w: T.sum_(T.mul(T.clamp(t, -0.5, 0.5), w)), (-0.5, 0.5)),
    "mean": (lambda t, w: T.sum_(T.square(T.mean(T.mul(t, w), axis=(0, 2)))), None),
    "sum_axis": (lambda t, w: T.sum_(T.square(T.sum_(T.mul(t, w), axis=1))), None),
    "reshape": (lambda t, w: T.sum_(T.mul(T.reshape(t, (6, 8)), T.reshape(w, (6, 8)))), None),
    "transpose": (lambda t, w: T.sum_(T.mul(T.transpose(t, (3, 1, 0, 2)), T.transpose(w, (3, 1, 0, 2)))), None),
    "avg_pool": (lambda t, w: T.sum_(T.square(T.avg_pool2d(T.mul(t, w), 2))), None),
    "upsample": (lambda t, w: T.sum_(T.square(T.upsample_nearest(T.mul(t, w), 2))), None),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_ten_instances(name):
    f, kinks = PRIMITIVES[name]
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, w = rand(rng, 2, 3, 2, 4), Tensor(rand(rng, 2, 3, 2, 4))
        mask = None if kinks is None else _away_from(kinks, x)
        assert finite_difference_check(lambda t: f(t, w), x, mask=mask) < TOL, (name, seed)


def test_linear_and_matmul_gradients():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, W, b = rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5)
        f = lambda t: T.sum_(T.square(T.linear(t, Tensor(W), Tensor(b))))
        assert finite_difference_check(f, x) < TOL
        g = lambda t: T.sum_(T.square(T.linear(Tensor(x), t, Tensor(b))))
        assert finite_difference_check(g, W) < TOL
        h = lambda t: T.sum_(T.square(T.matmul(Tensor(x), t)))
        assert finite_difference_check(h, W.T.copy()) < TOL


def test_take_rows_scatter_adds():
    table = Tensor(np.arange(6, dtype=np.float64).reshape(3, 2), requires_grad=True)
    idx = np.array([[0, 2], [2, 2]])
    out = T.take_rows(table, idx)
    assert np.array_equal(out.data, table.data[idx])
    T.sum_(out).backward()
    assert np.array_equal(table.grad, np.array([[1, 1], [0, 0], [3, 3]], dtype=np.float64))


def test_sum_of_squares_gradcheck_tight():
    x = np.random.default_rng(0).standard_normal(20)
    assert finite_difference_check(lambda t: T.sum_(T.square(t)), x, h=1e-5) < 1e-6


def test_small_conv_net_gradcheck():
    rng = np.random.default_rng(11)
    x = rand(rng, 2, 2, 6, 6)
    k1, k2 = rand(rng, 3, 2, 3, 3) * 0.5, rand(rng, 4, 3, 3, 3) * 0.5
    W = rand(rng, 5, 4)
    labels = np.array([1, 3])

    def net(t):
        h = T.relu(T.conv2d(t, Tensor(k1), None, 1, 1))
        h = T.conv2d(h, Tensor(k2), None, 2, 1)
        h = T.mean(h, axis=(2, 3))
        return T.softmax_cross_entropy(T.linear(h, Tensor(W)), labels)

    pre = T.conv2d(Tensor(x), Tensor(k1), None, 1, 1).data
    assert np.min(np.abs(pre)) > 1e-4  # no relu kink within reach of h
    assert finite_difference_check(net, x) < TOL


# -- tape behaviour -------------------------------------------------------------------

def test_second_backward_rejected():
    t = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum_(T.square(t))
    loss.backward()
    with pytest.raises(GraphError, match="already differentiated"):
        loss.backward()


def test_each_node_visited_once_on_diamond():
    t = Tensor(np.array([2.0]), requires_grad=True)
    s = T.square(t)
    out = T.sum_(T.add(T.mul(s, 3.0), s))   # d/dt 4 t^2 = 8 t
    out.backward()
    assert np.array_equal(t.grad, np.array([16.0]))


def test_grad_does_not_touch_buffers():
    a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    out = T.sum_(T.mul(a, b))
    (ga,) = T.grad(out, [a])
    assert np.array_equal(ga, np.ones(2))
    assert a.grad is None and b.grad is None


def test_no_grad_records_nothing():
    t = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        out = T.sum_(T.square(t))
    assert out._node is None and not out.requires_grad


def test_backward_needs_scalar_or_gradient():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError, match="scalar"):
        T.square(t).backward()


def test_precision_context():
    assert Tensor([1, 2]).dtype == np.float32
    with T.precision(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(1, 3), st.integers(0, 2),
       st.integers(0, 2 ** 31 - 1))
def test_conv_output_shape_property(n, c, size, stride, padding, seed):
    rng = np.random.default_rng(seed)
    k = 3
    x = rng.standard_normal((n, c, size, size))
    out = T.conv2d(Tensor(x), Tensor(rng.standard_normal((2, c, k, k))), None, stride, padding)
    expected = (size + 2 * padding - k) // stride + 1
    assert out.shape == (n, 2, expected, expected)
