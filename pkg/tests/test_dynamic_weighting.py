import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcfa.dynamic_weighting import DynamicWeightHead, compute_weights, weight_pressure_check
from mcfa.losses import attr_loss
from mcfa.tensor import backward
from oracles import central_difference, softmax_direct


def random_head(rng, D, d, conv=False, scale=1.0):
    head = DynamicWeightHead.zeros(D, d, convolutional=conv)
    head.weight.data[...] = rng.normal(0, scale, head.weight.shape)
    head.bias.data[...] = rng.normal(0, scale, d)
    return head


@pytest.mark.parametrize("conv", [False, True])
def test_zero_head_is_uniform(conv):
    head = DynamicWeightHead.zeros(2304, 40, convolutional=conv)
    x = np.random.default_rng(0).normal(size=(3, 2304))
    mu = compute_weights(head, x).data
    assert mu.shape == (3, 40)
    assert np.max(np.abs(mu - 1 / 40)) <= 1e-12


@pytest.mark.parametrize("d", [4, 40])
def test_bias_only_closed_form(d):
    head = DynamicWeightHead.zeros(16, d)
    head.bias.data[0] = 5.0
    mu = compute_weights(head, np.ones(16)).data
    denom = math.exp(5) + d - 1
    np.testing.assert_allclose(mu, [math.exp(5) / denom] + [1 / denom] * (d - 1), rtol=1e-14)


def test_conv_and_dense_agree():
    rng = np.random.default_rng(1)
    dense = random_head(rng, 8, 5)
    conv = DynamicWeightHead.zeros(8, 5, convolutional=True)
    conv.weight.data[...] = dense.weight.data.T[:, :, None, None]
    conv.bias.data[...] = dense.bias.data
    x = rng.normal(size=(4, 8))
    np.testing.assert_allclose(compute_weights(conv, x.reshape(4, 8, 1, 1)).data,
                               compute_weights(dense, x).data, rtol=1e-13)
    with pytest.raises(ValueError):
        compute_weights(dense, np.ones(7))


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2 ** 31), st.floats(0.01, 5.0))
def test_weights_on_simplex(d, seed, scale):
    rng = np.random.default_rng(seed)
    head = random_head(rng, 12, d, scale=scale)
    mu = compute_weights(head, rng.normal(size=(5, 12))).data
    assert np.all(mu > 0)
    np.testing.assert_allclose(mu.sum(axis=1), 1.0, atol=1e-12)


def test_matches_direct_softmax_and_shift_invariant():
    rng = np.random.default_rng(2)
    head = random_head(rng, 6, 4)
    x = rng.normal(size=6)
    mu = compute_weights(head, x).data
    np.testing.assert_allclose(mu, softmax_direct(x @ head.weight.data + head.bias.data),
                               rtol=1e-13)
    head.bias.data += 123.0
    np.testing.assert_allclose(compute_weights(head, x).data, mu, rtol=1e-12)


def test_weights_vary_per_sample():
    rng = np.random.default_rng(3)
    head = random_head(rng, 10, 4)
    mu = compute_weights(head, rng.normal(size=(2, 10))).data
    assert not np.allclose(mu[0], mu[1])


def test_pressure_two_attributes():
    p = weight_pressure_check([1.0, 0.0], [0.5, 0.5])
    np.testing.assert_allclose(p.logit_gradients, [0.25, -0.25], atol=1e-15)


def test_pressure_example():
    p = weight_pressure_check([1.0, 2.0], [0.5, 0.5])
    assert p.weighted_mean_loss == pytest.approx(1.5)
    np.testing.assert_allclose(p.logit_gradients, [-0.25, 0.25], atol=1e-15)
    np.testing.assert_allclose(p.closed_form, [-0.25, 0.25], atol=1e-15)
    assert p.sign_consistent


def test_pressure_zero_at_vertex():
    p = weight_pressure_check([0.3, 2.0, 5.0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(p.logit_gradients, 0.0, atol=1e-12)


def test_pressure_equal_losses_vanish():
    p = weight_pressure_check([0.7] * 5, [0.1, 0.2, 0.3, 0.2, 0.2])
    np.testing.assert_allclose(p.logit_gradients, 0.0, atol=1e-15)


def test_pressure_identity_against_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(100):
        d = int(rng.integers(2, 12))
        z = rng.normal(0, 2, d)
        l = rng.uniform(0, 3, d)
        mu = softmax_direct(z)
        p = weight_pressure_check(l, mu)
        numeric = central_difference(lambda: float(softmax_direct(z) @ l), z)
        assert np.max(np.abs(p.logit_gradients - p.closed_form)) <= 1e-9
        assert np.max(np.abs(p.logit_gradients - numeric)) < 1e-8
        assert p.sign_consistent


def test_pressure_rejects_bad_shapes():
    with pytest.raises(ValueError):
        weight_pressure_check([1.0, 2.0], [1.0])


@pytest.mark.parametrize("conv", [False, True])
def test_attr_loss_gradient_through_head(conv):
    rng = np.random.default_rng(5)
    head = random_head(rng, 6, 4, conv=conv)
    x = rng.normal(size=6)
    logits = rng.normal(size=(4, 2))
    labels = np.array([1, 0, 0, 1])

    def loss():
        return attr_loss(logits, labels, compute_weights(head, x)).item()

    backward(attr_loss(logits, labels, compute_weights(head, x)))
    numeric = central_difference(loss, head.weight.data)
    err = np.abs(head.weight.grad - numeric) / np.maximum(np.abs(numeric), 1e-8)
    assert err.max() < 1e-4
