import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kneegrade import layers as L
from kneegrade import tensor as T
from kneegrade.tensor import ShapeError, Tensor

from helpers import gradcheck, readout


def test_relu_values():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_identity_conv_is_noop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 4))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 2, 6, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    for stride in (1, 2):
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ho, wo = (6 - 1) // stride + 1, (5 - 1) // stride + 1
        ref = np.zeros((2, 3, ho, wo))
        for n in range(2):
            for o in range(3):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        ref[n, o, i, j] = (patch * w[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_dense_block_channel_rule():
    net = L.Network((2, 4, 4), [L.dense_block(growth=2, layers=2)], seed=0)
    assert net.output_shape == (6, 4, 4)
    assert net(np.zeros((1, 2, 4, 4))).shape == (1, 6, 4, 4)
    # inner layer j sees c0 + j * growth channels
    assert net.params["0.0.w"].shape[1] == 2
    assert net.params["0.1.w"].shape[1] == 4


def test_cross_entropy_examples():
    assert T.cross_entropy_loss(Tensor(np.zeros((3, 5))), [0, 2, 4]).item() == pytest.approx(math.log(5), abs=1e-12)
    logits = np.zeros((1, 5))
    logits[0, 3] = 1e9
    assert T.cross_entropy_loss(Tensor(logits), [3]).item() == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(3)
    z = rng.standard_normal((2, 5))
    labels = [1, 4]
    # scalar oracle, no autodiff
    ref = 0.0
    for row, lab in zip(z, labels):
        ref -= row[lab] - math.log(sum(math.exp(v) for v in row))
    assert T.cross_entropy_loss(Tensor(z), labels).item() == pytest.approx(ref / 2, rel=1e-12)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        T.cross_entropy_loss(Tensor(np.zeros((1, 5))), [5])
    with pytest.raises(ValueError):
        T.cross_entropy_loss(Tensor(np.zeros((1, 5))), [-1])
    with pytest.raises(ShapeError):
        T.cross_entropy_loss(Tensor(np.zeros((2, 5))), [1])


def test_mse_examples():
    assert T.mse_loss(Tensor([[2.5]]), [2.0]).item() == 0.25
    assert T.mse_loss(Tensor([[1.0], [3.0]]), [1.0, 3.0]).item() == 0.0
    assert T.mse_loss(Tensor([[0.0], [1.0]]), [2.0, 4.0]).item() == 6.5
    with pytest.raises(ShapeError):
        T.mse_loss(Tensor([[0.0], [1.0]]), [2.0])


def test_mse_gradient_analytic():
    pred = Tensor([[2.5]], requires_grad=True)
    T.mse_loss(pred, [2.0]).backward()
    assert pred.grad[0, 0] == 1.0


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.relu(x).backward()


def test_unused_weight_gets_zero_grad():
    net = L.Network((3,), [L.dense(2), L.dense(1)], seed=0)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = T.mse_loss(net(np.ones((4, 3))), np.zeros(4))
    T.backward(loss)
    assert unused.grad is None or not unused.grad.any()
    # a weight that only scales a zero input is part of the graph but gets an exact zero
    w = Tensor(np.ones((1, 3)), requires_grad=True)
    out = T.linear(Tensor(np.zeros((2, 3))), w, Tensor(np.zeros(1)))
    T.mse_loss(out, [1.0, 1.0]).backward()
    assert np.array_equal(w.grad, np.zeros((1, 3)))


def test_sgd_examples():
    w = Tensor([1.0], requires_grad=True)
    w.grad = np.array([0.5])
    L.SGD([w], lr=0.1, momentum=0.0).step()
    assert w.data[0] == pytest.approx(0.95, abs=1e-15)

    w = Tensor([1.0, -2.0], requires_grad=True)
    w.grad = np.zeros(2)
    L.SGD([w], lr=0.1).step()
    assert np.array_equal(w.data, [1.0, -2.0])

    # two momentum steps against the unrolled recurrence
    w = Tensor([1.0], requires_grad=True)
    opt = L.SGD([w], lr=0.1, momentum=0.9)
    w.grad = np.array([0.5])
    opt.step()
    w.grad = np.array([0.2])
    opt.step()
    v1 = 0.5
    v2 = 0.9 * v1 + 0.2
    assert w.data[0] == pytest.approx(1.0 - 0.1 * v1 - 0.1 * v2, abs=1e-15)

    with pytest.raises(ValueError):
        L.SGD([w], lr=0.0)
    with pytest.raises(ValueError):
        L.sgd_step([w], [np.zeros(1)], -1.0, 0.9)


def test_clip_norm_rescales_global_gradient():
    a, b = Tensor([0.0], requires_grad=True), Tensor([0.0], requires_grad=True)
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    L.SGD([a, b], lr=1.0, momentum=0.0, clip_norm=1.0).step()
    np.testing.assert_allclose([a.data[0], b.data[0]], [-0.6, -0.8], rtol=1e-15)


def test_determinism_bit_identical():
    def run():
        net = L.Network((1, 8, 8), [L.conv2d(4), L.relu(), L.dense_block(2, 2), L.global_avg_pool(), L.dense(5)],
                        seed=7)
        x = np.random.default_rng(7).standard_normal((3, 1, 8, 8))
        loss = T.cross_entropy_loss(net(x), [0, 1, 4])
        loss.backward()
        return loss.data.copy(), [p.grad.copy() for p in net.parameters()]

    (l1, g1), (l2, g2) = run(), run()
    assert np.array_equal(l1, l2)
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 7)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one_and_ce_nonnegative(z):
    p = T.softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    labels = np.zeros(len(z), dtype=int)
    assert T.cross_entropy_loss(Tensor(z), labels, num_classes=z.shape[1]).item() >= 0.0


@pytest.mark.parametrize("seed", range(5))
def test_bce_and_sigmoid_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4)) * 3
    t = (rng.random((3, 4)) > 0.5).astype(float)
    assert gradcheck(lambda a: T.bce_with_logits(a, t), [x]) <= 1e-4
    assert gradcheck(lambda a: readout(T.sigmoid(a), np.random.default_rng(seed)), [x]) <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_concat_take_columns_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 1, 2, 2))
    assert gradcheck(lambda p, q: readout(T.concat([p, q], axis=1), np.random.default_rng(seed)), [a, b]) <= 1e-4
    m = rng.standard_normal((3, 7))
    assert gradcheck(lambda p: readout(T.take_columns(p, 2, 5), np.random.default_rng(seed)), [m]) <= 1e-4


def test_shape_errors_name_layer():
    net = L.Network((1, 4, 4), [L.conv2d(2), L.relu(), L.flatten(), L.dense(3)], seed=0)
    with pytest.raises(L.LayerShapeError) as info:
        net(np.zeros((1, 2, 4, 4)))
    assert "layer 0" in str(info.value)
    with pytest.raises(L.LayerShapeError) as info:
        L.Network((1, 4, 4), [L.dense(3)])
    assert info.value.index == 0 and info.value.kind == "dense"
