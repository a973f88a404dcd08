import numpy as np
import pytest

from helpers import randomize_dyn_heads
from mcfa import tensor as T
from mcfa.data import ATTRIBUTE, Sample
from mcfa.losses import joint_loss
from mcfa.model import (McfaModel, ModelConfig, build_pyramid, forward_full, forward_lnet,
                        forward_mnet, forward_snet, param_group, parameter_shapes)

TINY = ModelConfig(channel_scale=1 / 16, num_attributes=3, num_landmarks=5,
                   input_sides=(32, 16, 8))


@pytest.fixture(scope="module")
def tiny_model():
    return McfaModel.create(TINY, seed=3)


@pytest.fixture
def image():
    return np.random.default_rng(11).uniform(0, 1, (1, 32, 32))


# ---- config

def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(input_sides=(224, 100, 50))
    with pytest.raises(ValueError):
        ModelConfig(channel_scale=1 / 256)
    assert ModelConfig(channel_scale="1/8").channel_scale == 0.125


@pytest.mark.parametrize("scale,sizes", [(1, (256, 1280, 2304)), (0.125, (32, 160, 288)),
                                         (0.5, (128, 640, 1152))])
def test_shared_sizes(scale, sizes):
    cfg = ModelConfig(channel_scale=scale)
    assert tuple(cfg.shared_size(s) for s in ("snet", "mnet", "lnet")) == sizes
    assert cfg.shared_size("lnet") == cfg.scaled(1024) + cfg.shared_size("mnet")


def test_full_scale_concat_operands():
    shapes = parameter_shapes(ModelConfig(channel_scale=1))
    assert shapes["mnet.fc.weight"] == (512, 1024)
    assert shapes["lnet.fc.weight"] == (512, 1024)
    assert shapes["snet.conv3_3.weight"][0] == 256
    assert shapes["lnet.conv5_3.weight"] == (512, 512, 3, 3)
    wide = parameter_shapes(ModelConfig(channel_scale=1, num_attributes=40))
    assert wide["mnet.dynw.weight"] == (1280, 40)
    assert wide["lnet.dynw.weight"] == (2304, 40)


# ---- pyramid

def test_pyramid_constant_default_sides():
    large, medium, small = build_pyramid(np.full((1, 224, 224), 0.3), ModelConfig())
    assert [t.shape[-1] for t in (large, medium, small)] == [224, 112, 56]
    for t in (large, medium, small):
        np.testing.assert_allclose(t.data, 0.3, atol=1e-15)


def test_pyramid_toy_means():
    img = np.arange(16, dtype=float).reshape(1, 4, 4)
    _, medium, small = build_pyramid(img)
    assert medium.data.tolist() == [[[2.5, 4.5], [10.5, 12.5]]]
    assert small.data.tolist() == [[[7.5]]]


def test_pyramid_rejects_bad_input():
    with pytest.raises(T.ShapeError):
        build_pyramid(np.zeros((1, 32, 16)))
    with pytest.raises(T.ShapeError):
        build_pyramid(np.zeros((1, 64, 64)), TINY)


# ---- stages

def test_snet_shapes(tiny_model, image):
    _, _, small = build_pyramid(image, TINY)
    shared, out = forward_snet(tiny_model, small)
    assert shared.shape == (1, TINY.shared_size("snet"), 1, 1)
    assert 0 <= out.face_prob.data[0] <= 1
    assert out.attr_logits.shape == (1, 3, 2)
    assert out.landmarks.shape == (1, 10)
    assert out.bbox.shape == (1, 4)


def test_snet_eighth_scale_shared():
    cfg = ModelConfig(channel_scale=1 / 8, input_sides=(32, 16, 8))
    shared, _ = forward_snet(McfaModel.create(cfg), np.zeros((1, 8, 8)))
    assert shared.shape[1:] == (32, 1, 1)


def test_stage_outputs(tiny_model, image):
    outs = forward_full(tiny_model, image)
    for o in outs:
        assert o.attr_logits.shape[-2:] == (3, 2)
        assert o.landmarks.shape[-1] == 10
        assert abs(o.dyn_weights.data.sum() - 1) < 1e-6
        assert np.all((o.face_prob.data >= 0) & (o.face_prob.data <= 1))


def test_mismatched_shared_feature(tiny_model, image):
    large, medium, small = build_pyramid(image, TINY)
    with pytest.raises(T.ShapeError):
        forward_mnet(tiny_model, medium, np.zeros((1, 7)))
    with pytest.raises(T.ShapeError):
        forward_lnet(tiny_model, large, np.zeros((1, 7)))


def test_cross_stage_sensitivity(image):
    model = randomize_dyn_heads(McfaModel.create(TINY, seed=5), np.random.default_rng(0))
    large, medium, small = build_pyramid(image, TINY)
    shared_s, _ = forward_snet(model, small)
    base_m = forward_mnet(model, medium, shared_s)[1]
    bumped = shared_s.data.copy()
    bumped[0, 0, 0, 0] += 1e-3
    moved_m = forward_mnet(model, medium, bumped)[1]
    diff = np.abs(moved_m.attr_logits.data - base_m.attr_logits.data).max()
    assert diff > 0

    zero_s = np.zeros_like(shared_s.data)
    shared_m0, out_m0 = forward_mnet(model, medium, zero_s)
    shared_m, out_m = forward_mnet(model, medium, shared_s)
    assert not np.array_equal(out_m0.face_logits.data, out_m.face_logits.data)
    out_l0 = forward_lnet(model, large, shared_m0)[1]
    out_l = forward_lnet(model, large, shared_m)[1]
    assert not np.array_equal(out_l0.face_logits.data, out_l.face_logits.data)


def test_zero_heads_give_neutral_outputs(image):
    model = McfaModel.create(TINY, seed=1)
    for name, p in model.named_parameters():
        if param_group(name).split(".")[1] != "body":
            p.data[...] = 0.0
    for o in forward_full(model, image):
        np.testing.assert_array_equal(o.face_prob.data, [0.5])
        np.testing.assert_allclose(o.dyn_weights.data, 1 / 3, atol=1e-15)


def test_end_to_end_gradient_reaches_snet(image):
    model = McfaModel.create(TINY, seed=2)
    rng = np.random.default_rng(0)
    sample = Sample(image, ATTRIBUTE, box=rng.uniform(0, 1, 4), landmarks=rng.uniform(0, 1, 10),
                    attributes=np.array([1, 0, 1]))
    model.zero_grad()
    T.backward(joint_loss(forward_full(model, image), sample).joint)
    norm = sum(float(np.sum(p.grad ** 2)) for n, p in model.named_parameters()
               if n.startswith("snet.conv") and p.grad is not None)
    assert norm > 0


def test_forward_deterministic(tiny_model, image):
    a = forward_full(tiny_model, image)
    b = forward_full(tiny_model, image)
    for x, y in zip(a, b):
        assert np.array_equal(x.attr_logits.data, y.attr_logits.data)
        assert np.array_equal(x.dyn_weights.data, y.dyn_weights.data)


def test_batched_forward_matches_single(tiny_model):
    imgs = np.random.default_rng(4).uniform(0, 1, (3, 1, 32, 32))
    batched = forward_full(tiny_model, imgs)[2]
    for i in range(3):
        single = forward_full(tiny_model, imgs[i])[2]
        np.testing.assert_allclose(batched.attr_logits.data[i], single.attr_logits.data[0],
                                   rtol=1e-12, atol=1e-12)


# ---- checkpoints

def test_checkpoint_round_trip(tmp_path, tiny_model):
    path = tmp_path / "m.npz"
    tiny_model.save(path)
    loaded = McfaModel.load(path)
    assert loaded.config == tiny_model.config
    assert list(loaded.params) == list(tiny_model.params)
    for name, p in tiny_model.named_parameters():
        assert np.array_equal(p.data, loaded[name].data)


def test_checkpoint_rejects_mismatch(tmp_path, tiny_model):
    path = tmp_path / "bad.npz"
    arrays = {k: v.data for k, v in tiny_model.named_parameters()}
    arrays.pop("snet.conv1_1.bias")
    np.savez(path, __format__=np.array("mcfa-checkpoint/1"),
             __config__=np.array('{"channel_scale": 0.0625, "num_attributes": 3, '
                                 '"num_landmarks": 5, "input_sides": [32, 16, 8], "channels": 1}'),
             **arrays)
    with pytest.raises(ValueError):
        McfaModel.load(path)


def test_param_groups_cover_eighteen(tiny_model):
    groups = {param_group(n) for n in tiny_model.params}
    assert len(groups) == 18
