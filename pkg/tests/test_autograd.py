"""Unit tests for the autodiff engine.

Hand-worked expected values are frozen as literals; gradient correctness
is checked against central finite differences in float64.
"""

from __future__ import annotations

import numpy as np
import pytest

from neoseize.autograd import (
    AutogradError,
    BnState,
    SgdNesterov,
    Tensor,
    add,
    backward,
    batch_norm,
    conv1d,
    cross_entropy,
    global_avg_pool,
    grad_check,
    max_over_axis,
    mul,
    pool1d,
    relu,
    reshape,
    softmax,
    take_map,
    tsum,
)


def t(data, rg=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


# ---------------------------------------------------------------------------
# forward anchors

def test_conv1d_valid_edge_detector():
    x = t([[1.0, 2.0, 3.0]])
    w = t([[[1.0, 0.0, -1.0]]])
    b = t([0.0])
    y = conv1d(x, w, b, stride=1, padding="valid")
    assert y.data.shape == (1, 1)
    assert y.data[0, 0] == -2.0


def test_conv1d_same_identity_kernel():
    x = t([[1.0, 2.0, 3.0, 4.0, 5.0]])
    w = t([[[0.0, 1.0, 0.0]]])
    b = t([0.0])
    y = conv1d(x, w, b)
    np.testing.assert_array_equal(y.data, x.data)


def test_conv1d_same_edge_detector():
    # zero padding: [0,1,2,3,0] correlated with [1,0,-1]
    x = t([[1.0, 2.0, 3.0]])
    y = conv1d(x, t([[[1.0, 0.0, -1.0]]]), t([0.0]))
    np.testing.assert_array_equal(y.data, [[-2.0, -2.0, 2.0]])


def test_conv1d_bias_and_multichannel():
    # y[k,i] = sum_c w[k,c,:] . x[c, i-1:i+2] + b[k]
    x = t([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    w = t(np.zeros((1, 2, 3)))
    w.data[0, 0, 1] = 2.0  # 2 * x[0, i]
    w.data[0, 1, 2] = 3.0  # 3 * x[1, i+1]
    y = conv1d(x, w, t([10.0]))
    np.testing.assert_array_equal(y.data, [[2.0 + 3.0 + 10.0, 10.0, 10.0]])


def test_conv1d_batch_matches_loop():
    rng = np.random.default_rng(11)
    xb = rng.normal(size=(3, 5, 17))
    w = t(rng.normal(size=(4, 3, 3)))
    b = t(rng.normal(size=4))
    batched = conv1d(t(xb), w, b, stride=2, padding="same").data
    for i in range(5):
        single = conv1d(t(xb[:, i, :]), w, b, stride=2, padding="same").data
        np.testing.assert_allclose(batched[:, i, :], single, rtol=0, atol=1e-12)


def test_conv1d_same_geometry_with_stride():
    x = t(np.zeros((1, 10)))
    w = t(np.zeros((1, 1, 3)))
    b = t([0.0])
    assert conv1d(x, w, b, stride=1).data.shape == (1, 10)
    assert conv1d(x, w, b, stride=2).data.shape == (1, 5)
    assert conv1d(x, w, b, stride=3).data.shape == (1, 4)
    assert conv1d(x, w, b, stride=1, padding="valid").data.shape == (1, 8)


def test_conv1d_valid_crop_property():
    # valid conv of a suffix equals the suffix of the valid conv
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 20))
    w = t(rng.normal(size=(1, 1, 3)))
    b = t([0.3])
    full = conv1d(t(x), w, b, padding="valid").data
    crop = conv1d(t(x[:, 2:]), w, b, padding="valid").data
    np.testing.assert_allclose(crop, full[:, 2:], rtol=0, atol=1e-12)


def test_conv1d_rejects_even_filters():
    with pytest.raises(AutogradError):
        conv1d(t(np.zeros((1, 8))), t(np.zeros((1, 1, 4))), t([0.0]))


def test_relu():
    y = relu(t([[-2.0, 0.0, 3.0]]))
    np.testing.assert_array_equal(y.data, [[0.0, 0.0, 3.0]])


def test_batch_norm_train_normalizes():
    x = t([[1.0, 3.0]])
    st = BnState(1, dtype=np.float64)
    y = batch_norm(x, t([1.0]), t([0.0]), st, "train")
    expect = (np.array([1.0, 3.0]) - 2.0) / np.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(y.data[0], expect, rtol=1e-12)
    # first batch seeds the running stats directly
    assert st.initialized
    np.testing.assert_allclose(st.mean, [2.0])
    np.testing.assert_allclose(st.var, [1.0])


def test_batch_norm_running_update():
    st = BnState(1, dtype=np.float64)
    x1 = t([[1.0, 3.0]])
    batch_norm(x1, t([1.0]), t([0.0]), st, "train", momentum_bn=0.1)
    x2 = t([[4.0, 8.0]])  # mu 6, biased var 4
    batch_norm(x2, t([1.0]), t([0.0]), st, "train", momentum_bn=0.1)
    np.testing.assert_allclose(st.mean, [0.9 * 2.0 + 0.1 * 6.0])
    np.testing.assert_allclose(st.var, [0.9 * 1.0 + 0.1 * 4.0])


def test_batch_norm_infer_uses_running_stats():
    st = BnState(1, dtype=np.float64)
    st.mean[:] = 2.0
    st.var[:] = 4.0
    st.initialized = True
    y = batch_norm(t([[4.0]]), t([3.0]), t([1.0]), st, "infer")
    np.testing.assert_allclose(y.data, [[3.0 * (4.0 - 2.0) / np.sqrt(4.0 + 1e-5) + 1.0]], rtol=1e-9)


def test_batch_norm_infer_without_stats_raises():
    with pytest.raises(AutogradError):
        batch_norm(t([[1.0]]), t([1.0]), t([0.0]), BnState(1), "infer")


def test_batch_norm_scale_shift_invariance():
    # output is invariant to affine rescaling of the input batch
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 4, 9))
    g, be = t([1.3, 0.7]), t([0.2, -0.1])
    y1 = batch_norm(t(x), g, be, BnState(2, dtype=np.float64), "train").data
    y2 = batch_norm(t(5.0 * x + 11.0), g, be, BnState(2, dtype=np.float64), "train").data
    np.testing.assert_allclose(y1, y2, atol=1e-4)  # exact only for eps -> 0


def test_pool1d_avg_and_max():
    x = t([[1.0, 3.0, 2.0, 4.0]])
    np.testing.assert_array_equal(pool1d(x, "avg", 2, 2).data, [[2.0, 3.0]])
    np.testing.assert_array_equal(pool1d(t([[1.0, 3.0, 2.0, 4.0]]), "max", 2, 2).data, [[3.0, 4.0]])


def test_pool1d_drops_remainder():
    x = t([[1.0, 2.0, 3.0, 4.0, 5.0]])
    y = pool1d(x, "avg", 2, 2)
    np.testing.assert_array_equal(y.data, [[1.5, 3.5]])


def test_global_avg_pool():
    y = global_avg_pool(t([[1.0, 2.0, 3.0, 4.0]]))
    np.testing.assert_array_equal(y.data, [2.5])
    yb = global_avg_pool(t(np.arange(24.0).reshape(2, 3, 4)))
    assert yb.data.shape == (2, 3)


def test_softmax_anchor():
    y = softmax(t([np.log(2.0), 0.0]))
    np.testing.assert_allclose(y.data, [2.0 / 3.0, 1.0 / 3.0], rtol=1e-12)


def test_softmax_stability_and_sum():
    y = softmax(t([[1000.0, 1000.0], [999.0, 1001.0]]), axis=0)
    assert np.isfinite(y.data).all()
    np.testing.assert_allclose(y.data.sum(axis=0), [1.0, 1.0], rtol=1e-12)


def test_cross_entropy_categorical():
    p = t([[0.5], [0.5]])
    loss = cross_entropy(p, np.array([0]))
    np.testing.assert_allclose(loss.data, np.log(2.0), rtol=1e-12)


def test_cross_entropy_weighted():
    p = t([[0.25], [0.75]])
    loss = cross_entropy(p, np.array([1]), class_weights=[1.0, 2.0])
    np.testing.assert_allclose(loss.data, -2.0 * np.log(0.75), rtol=1e-12)


def test_cross_entropy_binary():
    p = t(np.array([0.5, 0.9]))
    y = np.array([1.0, 1.0])
    loss = cross_entropy(p, y)
    np.testing.assert_allclose(loss.data, (np.log(2.0) - np.log(0.9)) / 2.0, rtol=1e-12)


def test_cross_entropy_clamps_extremes():
    loss = cross_entropy(t(np.array([0.0])), np.array([1.0]))
    np.testing.assert_allclose(loss.data, -np.log(1e-7), rtol=1e-9)
    assert np.isfinite(loss.data)


def test_softmax_cross_entropy_gradient_identity():
    # d(loss)/d(logits) = probs - onehot(target)
    z = t([np.log(2.0), 0.0], rg=True)
    loss = cross_entropy(softmax(z), np.array(0))
    backward(loss)
    np.testing.assert_allclose(z.grad, [2.0 / 3.0 - 1.0, 1.0 / 3.0], rtol=1e-12)


def test_max_over_axis():
    x = t([[1.0, 5.0], [3.0, 2.0]], rg=True)
    y = max_over_axis(x, axis=0)
    np.testing.assert_array_equal(y.data, [3.0, 5.0])
    backward(tsum(y))
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0]])


def test_take_map_and_reshape():
    x = t(np.arange(12.0).reshape(2, 2, 3), rg=True)
    y = take_map(x, 1)
    np.testing.assert_array_equal(y.data, x.data[1])
    z = reshape(y, (6,))
    backward(tsum(z))
    np.testing.assert_array_equal(x.grad[1], np.ones((2, 3)))
    np.testing.assert_array_equal(x.grad[0], np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# backward machinery

def test_backward_requires_scalar():
    x = t([1.0, 2.0], rg=True)
    with pytest.raises(AutogradError):
        backward(relu(x))


def test_backward_twice_raises():
    x = t([1.0, 2.0], rg=True)
    loss = tsum(mul(x, x))
    backward(loss)
    with pytest.raises(AutogradError):
        backward(loss)


def test_backward_deterministic():
    rng = np.random.default_rng(23)
    xd = rng.normal(size=(2, 3, 16))
    wd = rng.normal(size=(2, 2, 3))

    def run():
        x = t(xd, rg=True)
        w = t(wd, rg=True)
        b = t([0.1, -0.2], rg=True)
        st = BnState(2, dtype=np.float64)
        h = relu(batch_norm(conv1d(x, w, b), t([1.0, 1.0]), t([0.0, 0.0]), st, "train"))
        loss = tsum(mul(h, h))
        backward(loss)
        return x.grad.copy(), w.grad.copy(), b.grad.copy()

    g1, g2 = run(), run()
    for a, b_ in zip(g1, g2):
        assert np.array_equal(a, b_)


def test_shared_node_accumulates():
    x = t([2.0], rg=True)
    y = add(mul(x, x), mul(x, x))  # 2x^2, dy/dx = 4x = 8
    backward(tsum(y))
    np.testing.assert_array_equal(x.grad, [8.0])


# ---------------------------------------------------------------------------
# finite-difference gradient checks (float64)

def _offset_from_zero(a, margin=0.25):
    a = a.copy()
    a += margin * np.sign(a)
    return a


def test_grad_conv1d():
    rng = np.random.default_rng(3)
    x = t(rng.normal(size=(2, 3, 11)))
    w = t(rng.normal(size=(4, 2, 3)) * 0.5)
    b = t(rng.normal(size=4) * 0.1)

    def loss():
        y = conv1d(x, w, b, stride=2, padding="same")
        return tsum(mul(y, y))

    assert grad_check(loss, [x, w, b], max_coords=80, seed=0) < 1e-6


def test_grad_conv1d_valid():
    rng = np.random.default_rng(4)
    x = t(rng.normal(size=(1, 9)))
    w = t(rng.normal(size=(2, 1, 3)))
    b = t(rng.normal(size=2))

    def loss():
        y = conv1d(x, w, b, padding="valid")
        return tsum(mul(y, y))

    assert grad_check(loss, [x, w, b], max_coords=40, seed=1) < 1e-6


def test_grad_relu():
    rng = np.random.default_rng(9)
    x = t(_offset_from_zero(rng.normal(size=(2, 10))))

    def loss():
        y = relu(x)
        return tsum(mul(y, y))

    assert grad_check(loss, [x], max_coords=20, seed=2) < 1e-6


def test_grad_batch_norm():
    rng = np.random.default_rng(13)
    x = t(rng.normal(size=(2, 4, 7)))
    g = t(np.array([1.2, 0.8]))
    be = t(np.array([0.1, -0.3]))
    st = BnState(2, dtype=np.float64)
    # position-dependent weighting keeps the loss sensitive to x
    # (sum of squares alone is nearly invariant under the normalization)
    c = t(rng.normal(size=(2, 4, 7)))

    def loss():
        y = batch_norm(x, g, be, st, "train", update_running=False)
        return tsum(mul(mul(y, y), c))

    assert grad_check(loss, [x, g, be], max_coords=60, seed=3) < 1e-6


def test_grad_batch_norm_infer():
    rng = np.random.default_rng(14)
    x = t(rng.normal(size=(2, 9)))
    g = t(np.array([1.2, 0.8]))
    be = t(np.array([0.1, -0.3]))
    st = BnState(2, dtype=np.float64)
    st.mean[:] = [0.3, -0.2]
    st.var[:] = [1.5, 0.7]
    st.initialized = True

    def loss():
        y = batch_norm(x, g, be, st, "infer")
        return tsum(mul(y, y))

    assert grad_check(loss, [x, g, be], max_coords=30, seed=4) < 1e-6


def test_grad_pools():
    rng = np.random.default_rng(17)
    x = t(rng.normal(size=(2, 3, 12)))

    def loss_avg():
        y = pool1d(x, "avg", 3, 3)
        return tsum(mul(y, y))

    assert grad_check(loss_avg, [x], max_coords=40, seed=5) < 1e-6

    def loss_avg_overlap():
        y = pool1d(x, "avg", 3, 2)
        return tsum(mul(y, y))

    assert grad_check(loss_avg_overlap, [x], max_coords=40, seed=6) < 1e-6

    def loss_max():
        y = pool1d(x, "max", 2, 2)
        return tsum(mul(y, y))

    assert grad_check(loss_max, [x], max_coords=40, seed=7) < 1e-6


def test_grad_gap_softmax_ce():
    rng = np.random.default_rng(19)
    x = t(rng.normal(size=(2, 3, 8)))
    target = np.array([0, 1, 0])

    def loss():
        z = global_avg_pool(x)  # [2, 3]
        p = softmax(z, axis=0)
        return cross_entropy(p, target, class_weights=[1.0, 2.5])

    assert grad_check(loss, [x], max_coords=48, seed=8) < 1e-6


def test_grad_binary_ce_through_max():
    rng = np.random.default_rng(21)
    x = t(rng.normal(size=(2, 6, 8)))
    target = np.array([1.0, 0.0, 1.0])

    def loss():
        z = global_avg_pool(x)          # [2, 6]
        p = softmax(z, axis=0)
        pz = take_map(p, 1)             # [6]
        per_chan = reshape(pz, (3, 2))
        pmax = max_over_axis(per_chan, axis=1)
        return cross_entropy(pmax, target)

    assert grad_check(loss, [x], max_coords=48, seed=9) < 1e-6


# ---------------------------------------------------------------------------
# optimizer

def test_sgd_nesterov_two_steps():
    # constant unit gradient, lr 0.001, momentum 0.9:
    # v1 = -0.001, th1 = 0.9*v1 - 0.001 = -0.0019
    # v2 = -0.0019, th2 = th1 + 0.9*v2 - 0.001 = -0.00461
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = SgdNesterov([p], learning_rate=0.001, momentum=0.9)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    np.testing.assert_allclose(p.data, [-0.00461], rtol=0, atol=1e-15)


def test_sgd_zero_momentum_is_plain_sgd():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SgdNesterov([p], learning_rate=0.1, momentum=0.0)
    p.grad = np.array([2.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.8], rtol=0, atol=1e-15)


def test_sgd_minimizes_quadratic():
    p = Tensor(np.array([5.0]), requires_grad=True)
    opt = SgdNesterov([p], learning_rate=0.05, momentum=0.9)
    for _ in range(200):
        opt.zero_grad()
        loss = tsum(mul(add(p, Tensor(np.array([-3.0]))), add(p, Tensor(np.array([-3.0])))))
        backward(loss)
        opt.step()
    assert abs(p.data[0] - 3.0) < 1e-4
