"""Threshold-gated inference through S_Net, M_Net and L_Net."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import McfaModel, StageOutputs, build_pyramid, forward_lnet, forward_mnet, forward_snet

REJECTED_S, REJECTED_M, ACCEPTED = "rejected_at_s", "rejected_at_m", "accepted"


@dataclass(frozen=True)
class CascadeThresholds:
    t_s: float = 0.5
    t_m: float = 0.5

    def __post_init__(self):
        for name in ("t_s", "t_m"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class PredictionResult:
    status: str
    face_scores: tuple[float | None, float | None, float | None]
    attribute_probs: np.ndarray | None = None
    attributes: np.ndarray | None = None  # bool, prob > 0.5
    box: np.ndarray | None = None
    landmarks: np.ndarray | None = None
    dyn_weights: np.ndarray | None = None

    @property
    def accepted(self) -> bool:
        return self.status == ACCEPTED

    def to_record(self) -> dict:
        rec = {"status": self.status, "face_scores": list(self.face_scores)}
        if self.accepted:
            rec.update(attribute_probs=self.attribute_probs.tolist(),
                       attributes=[int(a) for a in self.attributes],
                       box=self.box.tolist(), landmarks=self.landmarks.tolist(),
                       dyn_weights=self.dyn_weights.tolist())
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def _accepted(p_s: float, p_m: float, out_l: StageOutputs, row: int = 0) -> PredictionResult:
    probs = out_l.attr_probs()[row]
    return PredictionResult(
        status=ACCEPTED,
        face_scores=(p_s, p_m, float(out_l.face_prob.data[row])),
        attribute_probs=probs,
        attributes=probs > 0.5,
        box=out_l.bbox.data[row].copy(),
        landmarks=out_l.landmarks.data[row].copy(),
        dyn_weights=out_l.dyn_weights.data[row].copy(),
    )


def predict(model: McfaModel, image, thresholds: CascadeThresholds = CascadeThresholds()
            ) -> PredictionResult:
    """Run the cascade on one (C,H,W) image, stopping at the first failed threshold."""
    with T.no_grad():
        large, medium, small = build_pyramid(image, model.config)
        shared_s, out_s = forward_snet(model, small)
        p_s = float(out_s.face_prob.data[0])
        if p_s < thresholds.t_s:
            return PredictionResult(REJECTED_S, (p_s, None, None))
        shared_m, out_m = forward_mnet(model, medium, shared_s)
        p_m = float(out_m.face_prob.data[0])
        if p_m < thresholds.t_m:
            return PredictionResult(REJECTED_M, (p_s, p_m, None))
        _, out_l = forward_lnet(model, large, shared_m)
        return _accepted(p_s, p_m, out_l)


@dataclass
class CascadeStats:
    n: int = 0
    pass_s: int = 0
    reject_s: int = 0
    pass_m: int = 0
    reject_m: int = 0
    evals: dict[str, int] = field(default_factory=lambda: {"snet": 0, "mnet": 0, "lnet": 0})

    @property
    def rejection_rate_s(self) -> float:
        return self.reject_s / self.n if self.n else 0.0

    @property
    def rejection_rate_m(self) -> float:
        return self.reject_m / self.pass_s if self.pass_s else 0.0

    def as_dict(self) -> dict:
        return {"n": self.n, "pass_s": self.pass_s, "reject_s": self.reject_s,
                "pass_m": self.pass_m, "reject_m": self.reject_m,
                "evals_snet": self.evals["snet"], "evals_mnet": self.evals["mnet"],
                "evals_lnet": self.evals["lnet"]}


def batch_predict(model: McfaModel, images, thresholds: CascadeThresholds = CascadeThresholds(),
                  batch_size: int = 64) -> tuple[list[PredictionResult], CascadeStats]:
    """Cascade over many images, each stage running only on the survivors of the last.

    ``images`` is an (N,C,H,W) array or a sequence of (C,H,W) arrays / samples.
    """
    if isinstance(images, np.ndarray) and images.ndim == 4:
        arrays: Sequence[np.ndarray] = list(images)
    else:
        arrays = [getattr(im, "image", im) for im in images]
    results: list[PredictionResult] = []
    stats = CascadeStats()
    for start in range(0, len(arrays), batch_size):
        chunk = np.stack(arrays[start:start + batch_size])
        results.extend(_predict_chunk(model, chunk, thresholds, stats))
    return results, stats


def _predict_chunk(model, chunk, thresholds, stats) -> list[PredictionResult]:
    n = len(chunk)
    out: list[PredictionResult | None] = [None] * n
    with T.no_grad():
        large, medium, small = build_pyramid(chunk, model.config)
        shared_s, out_s = forward_snet(model, small)
        stats.n += n
        stats.evals["snet"] += n
        p_s = out_s.face_prob.data
        keep_s = np.flatnonzero(p_s >= thresholds.t_s)
        for i in np.flatnonzero(p_s < thresholds.t_s):
            out[i] = PredictionResult(REJECTED_S, (float(p_s[i]), None, None))
        stats.pass_s += len(keep_s)
        stats.reject_s += n - len(keep_s)
        if len(keep_s):
            shared_m, out_m = forward_mnet(model, medium.data[keep_s],
                                           shared_s.data[keep_s])
            stats.evals["mnet"] += len(keep_s)
            p_m = out_m.face_prob.data
            pass_m = p_m >= thresholds.t_m
            for j in np.flatnonzero(~pass_m):
                i = keep_s[j]
                out[i] = PredictionResult(REJECTED_M, (float(p_s[i]), float(p_m[j]), None))
            rows = np.flatnonzero(pass_m)
            stats.pass_m += len(rows)
            stats.reject_m += len(keep_s) - len(rows)
            if len(rows):
                _, out_l = forward_lnet(model, large.data[keep_s[rows]], shared_m.data[rows])
                stats.evals["lnet"] += len(rows)
                for r, j in enumerate(rows):
                    i = keep_s[j]
                    out[i] = _accepted(float(p_s[i]), float(p_m[j]), out_l, r)
    return out  # type: ignore[return-value]
