"""The three cascaded sub-networks and their task heads.

S_Net sees the 1/4-side pyramid level, M_Net the 1/2-side level and L_Net
the full image. Each stage ends in a shared feature that feeds that stage's
four task heads and its dynamic-weight head; M_Net appends S_Net's shared
feature to its own, and L_Net appends M_Net's.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import tensor as T
from .dynamic_weighting import DynamicWeightHead, compute_weights
from .tensor import Tensor

CHECKPOINT_FORMAT = "mcfa-checkpoint/1"

STAGES = ("snet", "mnet", "lnet")
TASKS = ("cls", "box", "landmark", "attr")

# VGG-16 conv blocks; S_Net uses the first three, M_Net four, L_Net all five
VGG_BLOCKS = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))
STAGE_BLOCKS = {"snet": 3, "mnet": 4, "lnet": 5}
FC_WIDTH = 1024


@dataclass
class ModelConfig:
    channel_scale: float = 0.125
    num_attributes: int = 4
    num_landmarks: int = 5
    input_sides: tuple[int, int, int] = (224, 112, 56)
    channels: int = 1

    def __post_init__(self):
        self.channel_scale = float(Fraction(str(self.channel_scale)).limit_denominator(1 << 20)) \
            if isinstance(self.channel_scale, str) else float(self.channel_scale)
        self.input_sides = tuple(int(s) for s in self.input_sides)
        if self.channel_scale <= 0:
            raise ValueError("channel_scale must be positive")
        if self.num_attributes < 1 or self.num_landmarks < 1:
            raise ValueError("num_attributes and num_landmarks must be positive")
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if len(self.input_sides) != 3:
            raise ValueError("input_sides needs three sides (large, medium, small)")
        a, b, c = self.input_sides
        if not (a == 2 * b and b == 2 * c and c >= 1):
            raise ValueError(f"input_sides must halve at each level, got {self.input_sides}")
        if self.scaled(64) < 1:
            raise ValueError(f"channel_scale {self.channel_scale} leaves a layer with no channels")

    def scaled(self, width: int) -> int:
        return int(round(width * self.channel_scale))

    def block_widths(self, stage: str) -> list[list[int]]:
        return [[self.scaled(w) for w in block] for block in VGG_BLOCKS[:STAGE_BLOCKS[stage]]]

    def shared_size(self, stage: str) -> int:
        s = self.block_widths("snet")[-1][-1]
        if stage == "snet":
            return s
        m = self.scaled(FC_WIDTH) + s
        if stage == "mnet":
            return m
        return self.scaled(FC_WIDTH) + m

    def head_outputs(self) -> dict[str, int]:
        return {"cls": 2, "box": 4, "landmark": 2 * self.num_landmarks,
                "attr": 2 * self.num_attributes}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class StageOutputs:
    """One stage's predictions for a batch of N images."""

    face_logits: Tensor  # (N, 2)
    face_prob: Tensor  # (N,)
    bbox: Tensor  # (N, 4) left, top, height, width as fractions of the side
    landmarks: Tensor  # (N, 2k)
    attr_logits: Tensor  # (N, d, 2)
    dyn_weights: Tensor  # (N, d)

    def attr_probs(self) -> np.ndarray:
        z = self.attr_logits.data
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=-1, keepdims=True))[..., 1]


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


@dataclass
class McfaModel:
    config: ModelConfig
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "McfaModel":
        """He-normal weights, zero biases, zero dynamic-weight heads."""
        rng = np.random.default_rng(seed)
        params: OrderedDict[str, Tensor] = OrderedDict()
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".bias") or ".dynw." in name:
                data = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                data = _he(rng, shape, fan_in)
            params[name] = T.parameter(data, name=name)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self):
        return self.params.items()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def dyn_head(self, stage: str) -> DynamicWeightHead:
        return DynamicWeightHead(self.params[f"{stage}.dynw.weight"],
                                 self.params[f"{stage}.dynw.bias"],
                                 convolutional=stage == "snet")

    def copy(self) -> "McfaModel":
        return McfaModel(ModelConfig.from_dict(self.config.to_dict()),
                         OrderedDict((k, T.parameter(v.data.copy(), name=k))
                                     for k, v in self.params.items()))

    # ---- checkpoints: npz container, one array per canonical parameter name

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {name: p.data for name, p in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __format__=np.array(CHECKPOINT_FORMAT),
                     __config__=np.array(json.dumps(self.config.to_dict())), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "McfaModel":
        with np.load(path, allow_pickle=False) as z:
            fmt = str(z["__format__"])
            if fmt != CHECKPOINT_FORMAT:
                raise ValueError(f"{path}: unsupported checkpoint format {fmt!r}")
            config = ModelConfig.from_dict(json.loads(str(z["__config__"])))
            params = OrderedDict((k, T.parameter(z[k].copy(), name=k))
                                 for k in z.files if not k.startswith("__"))
        expected = parameter_shapes(config)
        got = {k: v.shape for k, v in params.items()}
        if got != dict(expected):
            raise ValueError(f"{path}: parameters do not match the embedded config")
        return cls(config, params)


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Canonical parameter names and shapes, in creation order."""
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    for stage in STAGES:
        c_in = config.channels
        for b, block in enumerate(config.block_widths(stage), start=1):
            for i, c_out in enumerate(block, start=1):
                shapes[f"{stage}.conv{b}_{i}.weight"] = (c_out, c_in, 3, 3)
                shapes[f"{stage}.conv{b}_{i}.bias"] = (c_out,)
                c_in = c_out
        if stage != "snet":
            fc = config.scaled(FC_WIDTH)
            shapes[f"{stage}.fc.weight"] = (c_in, fc)
            shapes[f"{stage}.fc.bias"] = (fc,)
        width = config.shared_size(stage)
        conv = stage == "snet"
        for task, n_out in config.head_outputs().items():
            for layer, out in (("layer1", width), ("layer2", width), ("out", n_out)):
                shapes[f"{stage}.{task}.{layer}.weight"] = (out, width, 1, 1) if conv else (width, out)
                shapes[f"{stage}.{task}.{layer}.bias"] = (out,)
        d = config.num_attributes
        shapes[f"{stage}.dynw.weight"] = (d, width, 1, 1) if conv else (width, d)
        shapes[f"{stage}.dynw.bias"] = (d,)
    return shapes


def param_group(name: str) -> str:
    """Coarse group of a parameter: '<stage>.body', '<stage>.<task>' or '<stage>.dynw'."""
    stage, part = name.split(".")[:2]
    if part.startswith("conv") or part == "fc":
        return f"{stage}.body"
    return f"{stage}.{part}"


# --------------------------------------------------------------------------
# forward passes


def _as_batch(x, channels: int, side: int, what: str) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != channels or x.shape[2] != side or x.shape[3] != side:
        raise T.ShapeError(f"{what} must be ({channels},{side},{side}) or batched, got {x.shape}")
    return x


def build_pyramid(image, config: ModelConfig | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """(large, medium, small) levels by repeated 2x2 average pooling."""
    image = T.as_tensor(image)
    if image.ndim not in (3, 4) or image.shape[-1] != image.shape[-2]:
        raise T.ShapeError(f"expected a square image, got shape {image.shape}")
    if config is not None and image.shape[-1] != config.input_sides[0]:
        raise T.ShapeError(f"image side {image.shape[-1]} != {config.input_sides[0]}")
    medium = T.avg_pool2d(image, 2, 2)
    small = T.avg_pool2d(medium, 2, 2)
    return image, medium, small


def _vgg_body(model: McfaModel, stage: str, x: Tensor) -> Tensor:
    blocks = model.config.block_widths(stage)
    for b, block in enumerate(blocks, start=1):
        for i in range(1, len(block) + 1):
            x = T.relu(T.conv2d(x, model[f"{stage}.conv{b}_{i}.weight"],
                                model[f"{stage}.conv{b}_{i}.bias"], 1, 1))
        if b < len(blocks):
            x = T.max_pool2d(x, 2, 2)
    return T.global_avg_pool2d(x)


def _head_conv(model: McfaModel, stage: str, task: str, shared: Tensor) -> Tensor:
    h = shared
    for layer in ("layer1", "layer2"):
        h = T.relu(T.conv2d(h, model[f"{stage}.{task}.{layer}.weight"],
                            model[f"{stage}.{task}.{layer}.bias"]))
    return T.flatten(T.conv2d(h, model[f"{stage}.{task}.out.weight"],
                              model[f"{stage}.{task}.out.bias"]))


def _head_fc(model: McfaModel, stage: str, task: str, shared: Tensor) -> Tensor:
    h = shared
    for layer in ("layer1", "layer2"):
        h = T.relu(T.fully_connected(h, model[f"{stage}.{task}.{layer}.weight"],
                                     model[f"{stage}.{task}.{layer}.bias"]))
    return T.fully_connected(h, model[f"{stage}.{task}.out.weight"],
                             model[f"{stage}.{task}.out.bias"])


def _stage_outputs(model: McfaModel, stage: str, shared: Tensor) -> StageOutputs:
    head = _head_conv if stage == "snet" else _head_fc
    d = model.config.num_attributes
    face_logits = head(model, stage, "cls", shared)
    face_prob = T.softmax(face_logits)[:, 1]
    attr_logits = head(model, stage, "attr", shared)
    return StageOutputs(
        face_logits=face_logits,
        face_prob=face_prob,
        bbox=head(model, stage, "box", shared),
        landmarks=head(model, stage, "landmark", shared),
        attr_logits=attr_logits.reshape((attr_logits.shape[0], d, 2)),
        dyn_weights=compute_weights(model.dyn_head(stage), shared),
    )


def forward_snet(model: McfaModel, small) -> tuple[Tensor, StageOutputs]:
    """Shared map (N, C_s, 1, 1) and S_Net outputs."""
    cfg = model.config
    with T.scope("snet"):
        x = _as_batch(small, cfg.channels, cfg.input_sides[2], "S_Net input")
        shared = _vgg_body(model, "snet", x)
        return shared, _stage_outputs(model, "snet", shared)


def _fc_stage(model: McfaModel, stage: str, x: Tensor, previous: Tensor) -> Tensor:
    feat = T.flatten(_vgg_body(model, stage, x))
    fc = T.relu(T.fully_connected(feat, model[f"{stage}.fc.weight"], model[f"{stage}.fc.bias"]))
    return T.concat(fc, previous)


def forward_mnet(model: McfaModel, medium, shared_s) -> tuple[Tensor, StageOutputs]:
    cfg = model.config
    with T.scope("mnet"):
        x = _as_batch(medium, cfg.channels, cfg.input_sides[1], "M_Net input")
        prev = T.as_tensor(shared_s)
        if prev.ndim in (1, 3):
            prev = prev.reshape((1, -1))
        elif prev.ndim == 4:
            prev = prev.reshape((prev.shape[0], -1))
        if prev.shape != (x.shape[0], cfg.shared_size("snet")):
            raise T.ShapeError(f"S_Net feature {prev.shape} does not match "
                               f"({x.shape[0]}, {cfg.shared_size('snet')})")
        shared = _fc_stage(model, "mnet", x, prev)
        return shared, _stage_outputs(model, "mnet", shared)


def forward_lnet(model: McfaModel, large, shared_m) -> tuple[Tensor, StageOutputs]:
    cfg = model.config
    with T.scope("lnet"):
        x = _as_batch(large, cfg.channels, cfg.input_sides[0], "L_Net input")
        prev = T.as_tensor(shared_m)
        if prev.ndim == 1:
            prev = prev.reshape((1, -1))
        if prev.shape != (x.shape[0], cfg.shared_size("mnet")):
            raise T.ShapeError(f"M_Net feature {prev.shape} does not match "
                               f"({x.shape[0]}, {cfg.shared_size('mnet')})")
        shared = _fc_stage(model, "lnet", x, prev)
        return shared, _stage_outputs(model, "lnet", shared)


def forward_full(model: McfaModel, image) -> tuple[StageOutputs, StageOutputs, StageOutputs]:
    """Training-mode forward: all three stages, no threshold gating."""
    large, medium, small = build_pyramid(image, model.config)
    shared_s, out_s = forward_snet(model, small)
    shared_m, out_m = forward_mnet(model, medium, shared_s)
    _, out_l = forward_lnet(model, large, shared_m)
    return out_s, out_m, out_l
