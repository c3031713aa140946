import numpy as np
import pytest

from oracles import central_difference, rel_error
from piggyback.errors import ConfigError, DataError, DegenerateBatchError
from piggyback.layers import (
    BN_FROZEN,
    BN_TRAIN,
    BatchNormParams,
    LayerSpec,
    Network,
    batchnorm_backward,
    batchnorm_forward,
    build_architecture,
    dense_backward,
    dense_forward,
    init_params,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)
from piggyback.masking import binarize


def test_dense_identity():
    x = np.array([[1.0, -2.0, 3.0]])
    y, _ = dense_forward(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(y, x)


def test_dense_backward_one_hot_structure(rng):
    x = rng.standard_normal((1, 4))
    W = rng.standard_normal((3, 4))
    dy = np.array([[0.0, 1.0, 0.0]])
    _, dW, _ = dense_backward(dy, x, W)
    assert not dW[[0, 2]].any()
    np.testing.assert_array_equal(dW[1], x[0])


def test_dense_backward_finite_differences(rng):
    x = rng.standard_normal((5, 4))
    W = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)
    dy = rng.standard_normal((5, 3))
    dx, dW, db = dense_backward(dy, x, W)
    assert rel_error(dW, central_difference(lambda v: np.sum(dy * dense_forward(x, v, b)[0]), W)) < 1e-6
    assert rel_error(dx, central_difference(lambda v: np.sum(dy * dense_forward(v, W, b)[0]), x)) < 1e-6
    assert rel_error(db, central_difference(lambda v: np.sum(dy * dense_forward(x, W, v)[0]), b)) < 1e-6


def test_relu_examples(rng):
    y, _ = relu_forward(np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(y, [0.0, 2.0])
    x = rng.standard_normal(50)
    x = x[np.abs(x) > 1e-3]
    dy = rng.standard_normal(x.shape)
    dx = relu_backward(dy, relu_forward(x)[1])
    assert rel_error(dx, central_difference(lambda v: np.sum(dy * relu_forward(v)[0]), x)) < 1e-6


def test_maxpool_example():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    y, cache = maxpool_forward(x, 2)
    assert y.item() == 4.0
    dx = maxpool_backward(np.ones_like(y), cache)
    np.testing.assert_array_equal(dx, [[[[0.0, 0.0], [0.0, 1.0]]]])


def test_maxpool_ties_go_to_first_maximum():
    x = np.ones((1, 1, 2, 2))
    y, cache = maxpool_forward(x, 2)
    dx = maxpool_backward(np.ones_like(y), cache)
    np.testing.assert_array_equal(dx, [[[[1.0, 0.0], [0.0, 0.0]]]])


@pytest.mark.parametrize("kernel,stride", [(2, 2), (3, 1), (2, 1)])
def test_maxpool_backward_finite_differences(rng, kernel, stride):
    x = rng.permutation(np.arange(2 * 3 * 6 * 6, dtype=float)).reshape(2, 3, 6, 6) / 10.0
    y, cache = maxpool_forward(x, kernel, stride)
    dy = rng.standard_normal(y.shape)
    dx = maxpool_backward(dy, cache)
    num = central_difference(lambda v: np.sum(dy * maxpool_forward(v, kernel, stride)[0]), x, step=1e-4)
    assert rel_error(dx, num) < 1e-6


def test_batchnorm_standardised_input_is_near_identity(rng):
    x = rng.standard_normal((64, 3))
    x = (x - x.mean(0)) / x.std(0)
    y, _ = batchnorm_forward(x, BatchNormParams.fresh(3), training=True)
    # epsilon shrinks unit-variance inputs by 1/sqrt(1 + eps)
    np.testing.assert_allclose(y * np.sqrt(1 + 1e-5), x, atol=1e-6)
    np.testing.assert_allclose(y, x, atol=5e-5)


def test_batchnorm_zero_gamma_gives_beta(rng):
    p = BatchNormParams.fresh(4)
    p.gamma[:] = 0
    p.beta[:] = [1.0, 2.0, 3.0, 4.0]
    y, _ = batchnorm_forward(rng.standard_normal((10, 4, 3, 3)), p, training=True)
    np.testing.assert_array_equal(y, np.broadcast_to(p.beta.reshape(1, 4, 1, 1), y.shape))


def test_batchnorm_direct_formula(rng):
    x = rng.standard_normal((8, 3, 4, 4)) * 2 + 1
    p = BatchNormParams(rng.uniform(0.5, 2, 3), rng.standard_normal(3), np.zeros(3), np.ones(3))
    y, _ = batchnorm_forward(x, p, training=True)
    for c in range(3):
        vals = x[:, c].ravel()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        expected = p.gamma[c] * (x[:, c] - mu) / np.sqrt(var + 1e-5) + p.beta[c]
        assert rel_error(y[:, c], expected) < 1e-10
        unbiased = var * len(vals) / (len(vals) - 1)
        assert abs(p.running_var[c] - (0.9 + 0.1 * unbiased)) < 1e-12
        assert abs(p.running_mean[c] - 0.1 * mu) < 1e-12


def test_batchnorm_rejects_single_sample_training():
    with pytest.raises(DegenerateBatchError):
        batchnorm_forward(np.ones((1, 2)), BatchNormParams.fresh(2), training=True)


@pytest.mark.parametrize("training", [True, False])
@pytest.mark.parametrize("shape", [(6, 3), (4, 3, 3, 2)])
def test_batchnorm_backward_finite_differences(rng, training, shape):
    x = rng.standard_normal(shape)
    p = BatchNormParams(rng.uniform(0.5, 2, 3), rng.standard_normal(3), rng.standard_normal(3), rng.uniform(0.5, 2, 3))
    dy = rng.standard_normal(shape)

    def loss(v, gamma=p.gamma, beta=p.beta):
        q = BatchNormParams(gamma, beta, p.running_mean.copy(), p.running_var.copy())
        return np.sum(dy * batchnorm_forward(v, q, training=training)[0])

    _, cache = batchnorm_forward(x, p.copy(), training=training)
    dx, dgamma, dbeta = batchnorm_backward(dy, cache)
    assert rel_error(dx, central_difference(loss, x)) < 1e-6
    assert rel_error(dgamma, central_difference(lambda g: loss(x, gamma=g), p.gamma)) < 1e-6
    assert rel_error(dbeta, central_difference(lambda b: loss(x, beta=b), p.beta)) < 1e-6


def test_softmax_cross_entropy_uniform_logits():
    loss, _ = softmax_cross_entropy(np.zeros((3, 5)), np.array([0, 2, 4]))
    assert abs(loss - np.log(5)) < 1e-15


def test_softmax_cross_entropy_confident_limit():
    logits = np.array([[1e3, 0.0, 0.0]])
    loss, _ = softmax_cross_entropy(logits, np.array([0]))
    assert loss < 1e-300 or loss == 0.0


def test_softmax_cross_entropy_gradient(rng):
    logits = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, 6)
    _, g = softmax_cross_entropy(logits, labels)
    num = central_difference(lambda z: softmax_cross_entropy(z, labels)[0], logits)
    assert rel_error(g, num) < 1e-6


def test_softmax_cross_entropy_label_range():
    with pytest.raises(DataError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_layer_spec_rules():
    with pytest.raises(ConfigError):
        LayerSpec("head", "head", in_features=2, out_features=2, maskable=True)
    with pytest.raises(ConfigError):
        LayerSpec("r", "relu", maskable=True)


def _cnn(rng, bn_mode):
    layers = build_architecture((1, 8, 8), 3, "cnn", hidden=(6,), channels=(2, 3))
    params = init_params(layers, rng)
    for spec in layers:
        if spec.kind == "batchnorm":
            bn = params[spec.name]["bn"]
            bn.gamma[:] = rng.uniform(0.5, 1.5, bn.gamma.shape)
            bn.running_var[:] = rng.uniform(0.5, 1.5, bn.gamma.shape)
    return Network(layers, params, bn_mode=bn_mode)


@pytest.mark.parametrize("bn_mode", [BN_FROZEN, BN_TRAIN])
def test_network_gradients_match_finite_differences(rng, bn_mode):
    net = _cnn(rng, bn_mode)
    masks = {s.name: binarize(rng.uniform(-1, 1, s.weight_shape()), 1e-9) for s in net.layers if s.maskable}
    net.masks = dict(masks)
    x = rng.standard_normal((4, 1, 8, 8))
    y = rng.integers(0, 3, 4)
    bn_snapshot = {s.name: net.params[s.name]["bn"].copy() for s in net.layers if s.kind == "batchnorm"}

    def restore():
        for name, p in bn_snapshot.items():
            net.params[name]["bn"] = p.copy()

    restore()
    logits = net.forward(x, training=True)
    _, dl = softmax_cross_entropy(logits, y)
    want = {("conv1", "mask"), ("fc3", "mask"), ("head", "weight"), ("head", "bias"), ("bn2", "gamma")}
    grads = net.backward(dl, want)

    def loss_with_mask(name):
        def f(mt):
            restore()
            net.masks = dict(masks, **{name: mt})
            out = softmax_cross_entropy(net.forward(x, training=True), y)[0]
            net.masks = dict(masks)
            return out
        return f

    for name in ("conv1", "fc3"):
        num = central_difference(loss_with_mask(name), masks[name])
        assert rel_error(grads[(name, "mask")], num) < 1e-6, name

    def loss_with_head(W):
        restore()
        old = net.params["head"]["weight"]
        net.params["head"]["weight"] = W
        out = softmax_cross_entropy(net.forward(x, training=True), y)[0]
        net.params["head"]["weight"] = old
        return out

    assert rel_error(grads[("head", "weight")], central_difference(loss_with_head, net.params["head"]["weight"])) < 1e-6


def test_all_ones_mask_bit_identical(rng):
    net = _cnn(rng, BN_FROZEN)
    x = rng.standard_normal((5, 1, 8, 8))
    plain = net.forward(x)
    net.masks = {s.name: np.ones(s.weight_shape()) for s in net.layers if s.maskable}
    assert np.array_equal(net.forward(x), plain)


def test_frozen_bn_untouched_by_training_pass(rng):
    net = _cnn(rng, BN_FROZEN)
    before = {s.name: [a.tobytes() for a in vars(net.params[s.name]["bn"]).values() if isinstance(a, np.ndarray)]
              for s in net.layers if s.kind == "batchnorm"}
    logits = net.forward(rng.standard_normal((4, 1, 8, 8)), training=True)
    net.backward(softmax_cross_entropy(logits, np.zeros(4, dtype=int))[1], {("conv1", "weight")})
    after = {s.name: [a.tobytes() for a in vars(net.params[s.name]["bn"]).values() if isinstance(a, np.ndarray)]
             for s in net.layers if s.kind == "batchnorm"}
    assert before == after
