import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcfa import tensor as T
from mcfa.data import ATTRIBUTE, FACE, LANDMARK, NONFACE, Sample
from mcfa.losses import (PROB_FLOOR, BatchTargets, SimplexError, TaskMask, attr_loss, bbox_loss,
                         face_cls_loss, joint_loss, landmark_loss, per_attribute_losses)
from mcfa.model import McfaModel, ModelConfig, forward_full, param_group
from oracles import softmax_direct

CFG = ModelConfig(channel_scale=1 / 16, num_attributes=3, num_landmarks=5, input_sides=(32, 16, 8))


def make_sample(kind, rng, with_landmarks=True):
    img = rng.uniform(0, 1, (1, 32, 32))
    if kind == NONFACE:
        return Sample(img, kind)
    box = rng.uniform(0, 1, 4)
    lm = rng.uniform(0, 1, 10) if kind == LANDMARK or (kind == ATTRIBUTE and with_landmarks) else None
    attrs = rng.integers(0, 2, 3) if kind == ATTRIBUTE else None
    return Sample(img, kind, box, lm, attrs)


def test_face_cls_examples():
    assert face_cls_loss(0.9, 1.0).item() == pytest.approx(0.10536051565782628, abs=1e-12)
    assert face_cls_loss(0.9, 0.0).item() == pytest.approx(2.302585092994046, abs=1e-12)
    assert face_cls_loss(0.5, 1.0).item() == pytest.approx(0.693147, abs=1e-6)
    assert face_cls_loss(0.5, 0.0).item() == pytest.approx(math.log(2), abs=1e-15)
    assert face_cls_loss(1 - 1e-7, 1.0).item() == pytest.approx(0.0, abs=2e-7)
    assert face_cls_loss(1e-7, 1.0).item() == pytest.approx(16.118, abs=1e-3)


def test_face_cls_clamped():
    top = -math.log(PROB_FLOOR)
    assert face_cls_loss(0.0, 1.0).item() == pytest.approx(top, rel=1e-12)
    assert face_cls_loss(1.0, 0.0).item() == pytest.approx(top, rel=1e-6)
    assert np.isfinite(face_cls_loss(0.0, 0.0).item())


def test_face_cls_nonnegative_and_minimised_at_label():
    p = np.linspace(0.01, 0.99, 99)
    l1 = face_cls_loss(p, np.ones_like(p)).data
    assert np.all(l1 >= 0) and np.all(np.diff(l1) < 0)


def test_regression_losses():
    assert bbox_loss(np.array([0, 0, 1, 1.]), np.array([1, 1, 1, 1.])).item() == 2.0
    assert bbox_loss(np.array([1, 2, 3, 4.]), np.array([0, 2, 3, 4.])).item() == 1.0
    assert bbox_loss(np.array([0.1, 0.2, 0.3, 0.4]),
                     np.array([0.2, 0.0, 0.3, 0.8])).item() == pytest.approx(0.21, abs=1e-15)
    assert landmark_loss(np.full(10, 0.3), np.full(10, 0.2)).item() == pytest.approx(0.1, abs=1e-15)
    lm = np.arange(10.0)
    assert landmark_loss(lm, lm).item() == 0.0
    assert landmark_loss(lm + 0.5, lm).item() == pytest.approx(2.5)
    with pytest.raises(T.ShapeError):
        bbox_loss(np.zeros(3), np.zeros(3))
    with pytest.raises(T.ShapeError):
        landmark_loss(np.zeros(10), np.zeros(8))


def test_attribute_loss_at_vertex_is_single_loss():
    rng = np.random.default_rng(9)
    logits, labels = rng.normal(size=(5, 2)), rng.integers(0, 2, 5)
    l = per_attribute_losses(logits, labels).data
    for q in range(5):
        assert attr_loss(logits, labels, np.eye(5)[q]).item() == l[q]


def test_attribute_loss_uniform_is_mean_and_half_is_ln2():
    rng = np.random.default_rng(10)
    logits, labels = rng.normal(size=(6, 2)), rng.integers(0, 2, 6)
    l = per_attribute_losses(logits, labels).data
    assert attr_loss(logits, labels, np.full(6, 1 / 6)).item() == pytest.approx(l.mean(), rel=1e-14)
    mu = softmax_direct(rng.normal(size=6))
    assert attr_loss(np.zeros((6, 2)), labels, mu).item() == pytest.approx(math.log(2), rel=1e-14)


def test_attribute_loss_at_zero_logits():
    logits = np.zeros((4, 2))
    labels = np.array([1, 0, 1, 1])
    np.testing.assert_allclose(per_attribute_losses(logits, labels).data, math.log(2), rtol=1e-14)
    assert attr_loss(logits, labels, np.full(4, 0.25)).item() == pytest.approx(math.log(2))


def test_attribute_loss_matches_direct_softmax():
    rng = np.random.default_rng(0)
    for _ in range(50):
        logits = rng.normal(0, 2, (5, 2))
        labels = rng.integers(0, 2, 5)
        mu = softmax_direct(rng.normal(size=5))
        direct = [-math.log(softmax_direct(z)[1] if y else 1 - softmax_direct(z)[1])
                  for z, y in zip(logits, labels)]
        assert attr_loss(logits, labels, mu).item() == pytest.approx(float(np.dot(mu, direct)),
                                                                      rel=1e-10)


def test_attr_loss_rejects_non_simplex():
    with pytest.raises(SimplexError):
        attr_loss(np.zeros((3, 2)), np.ones(3), np.array([0.5, 0.5, 0.5]))
    with pytest.raises(SimplexError):
        attr_loss(np.zeros((3, 2)), np.ones(3), np.array([1.2, -0.2, 0.0]))
    with pytest.raises(SimplexError):
        attr_loss(np.zeros((3, 2)), np.ones(3), np.array([np.nan, 0.5, 0.5]))
    with pytest.raises(T.ShapeError):
        attr_loss(np.zeros((3, 2)), np.ones(3), np.full(4, 0.25))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2 ** 31))
def test_weighted_loss_within_loss_range(d, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 3, (d, 2))
    labels = rng.integers(0, 2, d)
    mu = softmax_direct(rng.normal(0, 3, d))
    mu = mu / mu.sum()
    l = per_attribute_losses(logits, labels).data
    total = attr_loss(logits, labels, mu).item()
    assert l.min() - 1e-12 <= total <= l.max() + 1e-12


def test_task_masks():
    rng = np.random.default_rng(1)
    m = {k: TaskMask.for_sample(make_sample(k, rng)) for k in (NONFACE, FACE, LANDMARK, ATTRIBUTE)}
    assert m[NONFACE] == TaskMask(True, False, False, False)
    assert m[FACE] == TaskMask(True, True, False, False)
    assert m[LANDMARK] == TaskMask(True, True, True, False)
    assert m[ATTRIBUTE] == TaskMask(True, True, True, True)
    bare = TaskMask.for_sample(make_sample(ATTRIBUTE, rng, with_landmarks=False))
    assert bare == TaskMask(True, True, False, True)


def test_targets_reject_wrong_arity():
    rng = np.random.default_rng(2)
    s = make_sample(ATTRIBUTE, rng)
    with pytest.raises(T.ShapeError):
        BatchTargets.from_samples([s], 4, 5)
    with pytest.raises(T.ShapeError):
        BatchTargets.from_samples([s], 3, 4)


@pytest.fixture(scope="module")
def model():
    return McfaModel.create(CFG, seed=4)


def _grads_by_group(model, samples, **kw):
    model.zero_grad()
    imgs = np.stack([s.image for s in samples])
    loss = joint_loss(forward_full(model, imgs), samples, **kw)
    T.backward(loss.joint)
    norms = {}
    for name, p in model.named_parameters():
        g = 0.0 if p.grad is None else float(np.sum(p.grad ** 2))
        norms[param_group(name)] = norms.get(param_group(name), 0.0) + g
    return loss, norms


def test_masked_heads_get_exactly_zero_gradient(model):
    rng = np.random.default_rng(3)
    loss, norms = _grads_by_group(model, [make_sample(NONFACE, rng), make_sample(NONFACE, rng)])
    for stage in ("snet", "mnet", "lnet"):
        for task in ("box", "landmark", "attr", "dynw"):
            assert norms[f"{stage}.{task}"] == 0.0
        assert norms[f"{stage}.cls"] > 0
    assert set(loss.entries) == {(s, "cls") for s in ("snet", "mnet", "lnet")}


def test_masked_samples_do_not_change_loss(model):
    """A face-only sample adds nothing to the attribute entries beyond the batch size."""
    rng = np.random.default_rng(5)
    a = make_sample(ATTRIBUTE, rng)
    f = make_sample(FACE, rng)
    alone = joint_loss(forward_full(model, a.image), [a])
    both = joint_loss(forward_full(model, np.stack([a.image, f.image])), [a, f])
    for stage in ("snet", "mnet", "lnet"):
        assert both.value(stage, "attr") == pytest.approx(alone.value(stage, "attr") / 2, rel=1e-12)


def test_attribute_only_tasks(model):
    rng = np.random.default_rng(6)
    samples = [make_sample(ATTRIBUTE, rng) for _ in range(2)]
    _, norms = _grads_by_group(model, samples, tasks=("attr",))
    for stage in ("snet", "mnet", "lnet"):
        for task in ("cls", "box", "landmark"):
            assert norms[f"{stage}.{task}"] == 0.0
        assert norms[f"{stage}.attr"] > 0


def test_joint_is_sum_of_entries(model):
    rng = np.random.default_rng(7)
    samples = [make_sample(k, rng) for k in (NONFACE, FACE, LANDMARK, ATTRIBUTE)]
    loss = joint_loss(forward_full(model, np.stack([s.image for s in samples])), samples)
    assert len(loss.entries) == 12
    assert loss.joint.item() == pytest.approx(loss.entry_sum(), rel=1e-12)


def test_fixed_uniform_weighting_leaves_dynw_untouched(model):
    rng = np.random.default_rng(8)
    _, norms = _grads_by_group(model, [make_sample(ATTRIBUTE, rng)], weighting="fixed-uniform")
    assert all(norms[f"{s}.dynw"] == 0.0 for s in ("snet", "mnet", "lnet"))
    with pytest.raises(ValueError):
        _grads_by_group(model, [make_sample(ATTRIBUTE, rng)], weighting="learned")
