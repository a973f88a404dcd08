"""Fixtures shared by several test modules."""
import numpy as np

from mcfa.model import STAGES, McfaModel, ModelConfig, forward_full


def spread_model(config: ModelConfig, images, seed=0, spread=2.0) -> McfaModel:
    """A model whose face scores cover most of (0, 1) on ``images``.

    Each stage's score layer is rescaled so the face-vs-background logit
    margin is centred at zero with standard deviation ``spread``.
    """
    model = McfaModel.create(config, seed=seed)
    outs = forward_full(model, images)
    for stage, out in zip(STAGES, outs):
        margin = out.face_logits.data[:, 1] - out.face_logits.data[:, 0]
        scale = spread / margin.std()
        w, b = model[f"{stage}.cls.out.weight"], model[f"{stage}.cls.out.bias"]
        w.data *= scale
        b.data *= scale
        b.data[1] -= scale * np.median(margin)
    return model


def randomize_dyn_heads(model: McfaModel, rng: np.random.Generator, scale=0.5) -> McfaModel:
    for s in STAGES:
        model[f"{s}.dynw.weight"].data[...] = rng.normal(0, scale, model[f"{s}.dynw.weight"].shape)
        model[f"{s}.dynw.bias"].data[...] = rng.normal(0, scale, model.config.num_attributes)
    return model
