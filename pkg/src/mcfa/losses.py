"""Task losses, per-sample task masks and the summed three-stage loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import ATTRIBUTE, FACE, LANDMARK, NONFACE, Sample
from .model import STAGES, TASKS, StageOutputs
from .tensor import Tensor

PROB_FLOOR = 1e-7


class SimplexError(ValueError):
    pass


def face_cls_loss(p, y) -> Tensor:
    """Binary negative log-likelihood, elementwise, with p clamped away from 0 and 1."""
    p = T.clip(T.as_tensor(p), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = T.as_tensor(y)
    return -(y * T.log(p) + (1.0 - y) * T.log(1.0 - p))


def _sq_dist(pred, truth, what: str) -> Tensor:
    pred, truth = T.as_tensor(pred), T.as_tensor(truth)
    if pred.shape != truth.shape:
        raise T.ShapeError(f"{what}: prediction {pred.shape} vs truth {truth.shape}")
    return T.square(pred - truth).sum(axis=-1)


def bbox_loss(pred, truth) -> Tensor:
    """Squared Euclidean distance over (left, top, height, width)."""
    if T.as_tensor(pred).shape[-1] != 4:
        raise T.ShapeError("box vectors have 4 entries")
    return _sq_dist(pred, truth, "bbox_loss")


def landmark_loss(pred, truth) -> Tensor:
    if T.as_tensor(pred).shape[-1] % 2:
        raise T.ShapeError("landmark vectors hold (x, y) pairs")
    return _sq_dist(pred, truth, "landmark_loss")


def per_attribute_losses(attr_logits, labels) -> Tensor:
    """Two-way softmax cross-entropy per attribute: (..., d, 2) logits -> (..., d)."""
    probs = T.softmax(T.as_tensor(attr_logits), axis=-1)
    return face_cls_loss(probs[..., 1], labels)


def check_simplex(weights: np.ndarray, tol: float = 1e-6) -> None:
    """Weights must be finite, nonnegative and sum to 1 (vertices allowed)."""
    if (not np.all(np.isfinite(weights)) or np.any(weights < 0)
            or np.any(np.abs(weights.sum(axis=-1) - 1.0) > tol)):
        raise SimplexError("attribute weights must be finite, nonnegative and sum to 1")


def attr_loss(attr_logits, labels, dyn_weights) -> Tensor:
    """Per-attribute losses combined with the dynamic weights: mu . l."""
    mu = T.as_tensor(dyn_weights)
    check_simplex(mu.data)
    losses = per_attribute_losses(attr_logits, labels)
    if losses.shape != mu.shape:
        raise T.ShapeError(f"attr_loss: {losses.shape} losses vs {mu.shape} weights")
    return (mu * losses).sum(axis=-1)


# --------------------------------------------------------------------------
# masks and targets


@dataclass(frozen=True)
class TaskMask:
    use_cls: bool
    use_box: bool
    use_landmark: bool
    use_attr: bool

    @classmethod
    def for_sample(cls, sample: Sample) -> "TaskMask":
        if sample.kind == NONFACE:
            return cls(True, False, False, False)
        if sample.kind == FACE:
            return cls(True, True, False, False)
        if sample.kind == LANDMARK:
            return cls(True, True, True, False)
        return cls(True, True, sample.landmarks is not None, True)

    def uses(self, task: str) -> bool:
        return getattr(self, f"use_{task}")


@dataclass
class BatchTargets:
    face: np.ndarray  # (N,)
    box: np.ndarray  # (N, 4)
    landmarks: np.ndarray  # (N, 2k)
    attributes: np.ndarray  # (N, d)
    masks: dict[str, np.ndarray]  # task -> (N,) of 0/1

    def __len__(self) -> int:
        return len(self.face)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], num_attributes: int,
                     num_landmarks: int) -> "BatchTargets":
        n = len(samples)
        face = np.zeros(n)
        box = np.zeros((n, 4))
        lm = np.zeros((n, 2 * num_landmarks))
        attrs = np.zeros((n, num_attributes))
        masks = {t: np.zeros(n) for t in TASKS}
        for i, s in enumerate(samples):
            m = TaskMask.for_sample(s)
            face[i] = float(s.is_face)
            if s.box is not None:
                box[i] = s.box
            if s.landmarks is not None:
                if len(s.landmarks) != 2 * num_landmarks:
                    raise T.ShapeError(f"sample has {len(s.landmarks)} landmark coordinates, "
                                       f"model expects {2 * num_landmarks}")
                lm[i] = s.landmarks
            if s.attributes is not None:
                if len(s.attributes) != num_attributes:
                    raise T.ShapeError(f"sample has {len(s.attributes)} attributes, "
                                       f"model expects {num_attributes}")
                attrs[i] = s.attributes
            for t in TASKS:
                masks[t][i] = float(m.uses(t))
        return cls(face, box, lm, attrs, masks)


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


# --------------------------------------------------------------------------
# joint loss


@dataclass
class LossBreakdown:
    """Batch-mean loss per (stage, task); ``joint`` is the sum of the entries."""

    entries: dict[tuple[str, str], Tensor] = field(default_factory=dict)
    joint: Tensor = field(default_factory=lambda: Tensor(0.0))

    def value(self, stage: str, task: str) -> float:
        t = self.entries.get((stage, task))
        return 0.0 if t is None else t.item()

    def as_dict(self) -> dict[str, float]:
        out = {f"{s}.{t}": v.item() for (s, t), v in self.entries.items()}
        out["joint"] = self.joint.item()
        return out

    def entry_sum(self) -> float:
        return float(sum(v.item() for v in self.entries.values()))


def stage_task_losses(out: StageOutputs, targets: BatchTargets, task: str,
                      weighting: str = "dynamic") -> Tensor:
    """Unmasked per-sample loss of one task at one stage, shape (N,)."""
    if task == "cls":
        return face_cls_loss(out.face_prob, targets.face)
    if task == "box":
        return bbox_loss(out.bbox, targets.box)
    if task == "landmark":
        return landmark_loss(out.landmarks, targets.landmarks)
    if task == "attr":
        if weighting == "dynamic":
            mu = out.dyn_weights
        elif weighting == "fixed-uniform":
            n, d = out.dyn_weights.shape
            mu = Tensor(np.full((n, d), 1.0 / d))
        else:
            raise ValueError(f"unknown weighting {weighting!r}")
        return attr_loss(out.attr_logits, targets.attributes, mu)
    raise ValueError(f"unknown task {task!r}")


def joint_loss(outputs: Sequence[StageOutputs], batch, tasks: Iterable[str] = TASKS,
               weighting: str = "dynamic") -> LossBreakdown:
    """Sum over the three stages and the enabled tasks of the masked batch-mean losses.

    ``batch`` is a :class:`BatchTargets`, a :class:`Sample` or a list of samples.
    Tasks outside ``tasks`` are not evaluated at all; tasks masked out for a
    sample contribute an exact zero for it.
    """
    if len(outputs) != 3:
        raise ValueError("expected outputs for the three stages")
    if not isinstance(batch, BatchTargets):
        samples = [batch] if isinstance(batch, Sample) else list(batch)
        n, d = outputs[0].dyn_weights.shape
        k = outputs[0].landmarks.shape[-1] // 2
        batch = BatchTargets.from_samples(samples, d, k)
    tasks = [t for t in TASKS if t in set(tasks)]
    n = len(batch)
    entries: dict[tuple[str, str], Tensor] = {}
    joint = None
    for stage, out in zip(STAGES, outputs):
        for task in tasks:
            mask = batch.masks[task]
            if not mask.any():
                continue
            per_sample = stage_task_losses(out, batch, task, weighting)
            entry = (per_sample * Tensor(mask)).sum() / float(n)
            entries[(stage, task)] = entry
            joint = entry if joint is None else joint + entry
    if joint is None:
        joint = Tensor(0.0)
    return LossBreakdown(entries, joint)
