"""Joint training, evaluation, gradient checking and the variant ablation."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .cascade import CascadeThresholds, batch_predict
from .data import ATTRIBUTE, FACE, LANDMARK, NONFACE, Sample, make_batches
from .losses import BatchTargets, SimplexError, joint_loss, stack_images
from .model import STAGES, TASKS, McfaModel, ModelConfig, forward_full, param_group

log = logging.getLogger(__name__)

VARIANT_TASKS: dict[str, tuple[str, ...]] = {
    "MCFA": ("cls", "box", "landmark", "attr"),
    "MCFA_FD_FAC": ("cls", "box", "attr"),
    "MCFA_FLL_FAC": ("cls", "landmark", "attr"),
    "MCFA_FAC": ("attr",),
}
WEIGHTINGS = ("dynamic", "fixed-uniform")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float, reason: str = ""):
        what = reason or f"non-finite loss {value}"
        super().__init__(f"{what} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


class GradcheckFailure(AssertionError):
    pass


@dataclass
class TrainConfig:
    variant: str = "MCFA"
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 8
    rng_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    thresholds: CascadeThresholds = field(default_factory=CascadeThresholds)
    weighting: str = "dynamic"
    lr_milestones: tuple[float, ...] = (0.6, 0.85)
    lr_decay: float = 0.1
    # 0 evaluates only after the last epoch
    eval_every: int = 0
    # stop once training attribute accuracy reaches this (needs eval_every > 0)
    target_accuracy: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANT_TASKS:
            raise ValueError(f"variant must be one of {sorted(VARIANT_TASKS)}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be positive and momentum in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @property
    def tasks(self) -> tuple[str, ...]:
        return VARIANT_TASKS[self.variant]

    @property
    def eval_thresholds(self) -> CascadeThresholds:
        # an untrained face classifier cannot gate the cascade
        if "cls" not in self.tasks:
            return CascadeThresholds(0.0, 0.0)
        return self.thresholds

    def learning_rate_at(self, epoch: int) -> float:
        """Step schedule: multiply by ``lr_decay`` at each milestone fraction of the run."""
        passed = sum(epoch >= int(math.floor(m * self.epochs)) for m in self.lr_milestones)
        return self.learning_rate * self.lr_decay ** passed

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # ---- flat key=value text form

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "model":
                for mf in dataclasses.fields(v):
                    lines.append(f"model.{mf.name} = {_fmt(getattr(v, mf.name))}")
            elif f.name == "thresholds":
                lines += [f"t_s = {v.t_s!r}", f"t_m = {v.t_m!r}"]
            else:
                lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        raw: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
        model_kw, top_kw, thr = {}, {}, {}
        model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
        top_fields = {f.name for f in dataclasses.fields(cls)} - {"model", "thresholds"}
        for key, value in raw.items():
            if key.startswith("model."):
                name = key[len("model."):]
                if name not in model_fields:
                    raise ValueError(f"unknown config key {key!r}")
                model_kw[name] = _parse_model_value(name, value)
            elif key in ("t_s", "t_m"):
                thr[key] = float(value)
            elif key in top_fields:
                top_kw[key] = _parse_top_value(key, value)
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(model=ModelConfig(**model_kw), thresholds=CascadeThresholds(**thr), **top_kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return "none" if v is None else repr(v) if isinstance(v, float) else str(v)


def _parse_model_value(name: str, value: str):
    if name == "input_sides":
        return tuple(int(x) for x in value.split(","))
    if name == "channel_scale":
        return value  # ModelConfig accepts "1/8"
    return int(value)


def _parse_top_value(name: str, value: str):
    if name in ("variant", "weighting"):
        return value
    if name == "lr_milestones":
        return tuple(float(x) for x in value.split(",") if x.strip())
    if name == "target_accuracy":
        return None if value.lower() == "none" else float(value)
    if name in ("learning_rate", "momentum", "lr_decay"):
        return float(value)
    return int(value)


# --------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    per_attribute_accuracy: list[float] = field(default_factory=list)
    average_accuracy: float = 0.0
    num_evaluated: int = 0
    num_rejected: int = 0
    loss_trace: list[dict[str, float]] = field(default_factory=list)
    weight_trace: list[dict[str, list[float]]] = field(default_factory=list)
    accuracy_trace: list[tuple[int, float]] = field(default_factory=list)
    grad_norm_trace: list[dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def key_values(self) -> list[str]:
        lines = [f"average_accuracy={self.average_accuracy!r}",
                 f"num_evaluated={self.num_evaluated}", f"num_rejected={self.num_rejected}"]
        lines += [f"accuracy_{q}={a!r}" for q, a in enumerate(self.per_attribute_accuracy)]
        return lines

    def table(self, names: Sequence[str] | None = None) -> str:
        names = names or [f"attr{q}" for q in range(len(self.per_attribute_accuracy))]
        width = max([len(n) for n in names] + [len("average")])
        rows = [f"{n:<{width}}  {100 * a:6.2f}%" for n, a in zip(names, self.per_attribute_accuracy)]
        rows.append(f"{'average':<{width}}  {100 * self.average_accuracy:6.2f}%")
        rows.append(f"evaluated {self.num_evaluated}, rejected by the cascade {self.num_rejected}")
        return "\n".join(rows)


def evaluate(model: McfaModel, samples: Sequence[Sample],
             thresholds: CascadeThresholds = CascadeThresholds()) -> Metrics:
    """Per-attribute accuracy of cascade predictions on the attribute-annotated samples.

    Samples rejected by the cascade count as predicting every attribute negative.
    """
    labelled = [s for s in samples if s.attributes is not None]
    if not labelled:
        raise ValueError("evaluation needs attribute-annotated samples")
    results, stats = batch_predict(model, labelled, thresholds)
    d = model.config.num_attributes
    correct = np.zeros(d)
    for s, r in zip(labelled, results):
        pred = r.attributes if r.accepted else np.zeros(d, dtype=bool)
        correct += pred == s.attributes.astype(bool)
    acc = correct / len(labelled)
    return Metrics(per_attribute_accuracy=acc.tolist(), average_accuracy=float(acc.mean()),
                   num_evaluated=len(labelled), num_rejected=len(labelled) - stats.pass_m)


# --------------------------------------------------------------------------
# training


def check_variant_data(variant: str, samples: Sequence[Sample]) -> None:
    kinds = {s.kind for s in samples}
    if ATTRIBUTE not in kinds:
        raise ValueError(f"{variant} needs attribute-annotated samples")
    tasks = VARIANT_TASKS[variant]
    if "landmark" in tasks and not any(s.landmarks is not None for s in samples):
        raise ValueError(f"{variant} needs landmark annotations")


def _sgd_step(model: McfaModel, velocity: dict[str, np.ndarray], lr: float, momentum: float):
    for name, p in model.named_parameters():
        if p.grad is None:
            continue
        v = velocity.get(name)
        v = p.grad.copy() if v is None else momentum * v + p.grad
        velocity[name] = v
        p.data -= lr * v


def _group_grad_norms(model: McfaModel) -> dict[str, float]:
    sq: dict[str, float] = {}
    for name, p in model.named_parameters():
        g = param_group(name)
        sq[g] = sq.get(g, 0.0) + (0.0 if p.grad is None else float(np.sum(p.grad * p.grad)))
    return {g: math.sqrt(v) for g, v in sq.items()}


def train(config: TrainConfig, samples: Sequence[Sample], out_dir: str | Path | None = None,
          progress: Callable[[str], None] | None = None) -> tuple[McfaModel, Metrics]:
    """SGD with momentum on the variant's joint loss.

    Returns the trained model and metrics: training-set accuracy of the final
    model plus per-epoch loss, weight, accuracy and gradient-norm traces.
    Writes ``checkpoint_XXX.npz`` per epoch, ``model.npz`` and
    ``metrics.json`` when ``out_dir`` is given.
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    check_variant_data(config.variant, samples)
    cfg = config.model
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.to_text())
    say = progress or log.info

    model = McfaModel.create(cfg, seed=config.rng_seed)
    velocity: dict[str, np.ndarray] = {}
    tasks = config.tasks
    metrics = Metrics()
    n_total = len(samples)
    stage_keys = [f"{s}.{t}" for s in STAGES for t in TASKS]

    for epoch in range(config.epochs):
        t0 = time.time()
        lr = config.learning_rate_at(epoch)
        loss_sum = dict.fromkeys(stage_keys + ["joint"], 0.0)
        weight_sum = {s: np.zeros(cfg.num_attributes) for s in STAGES}
        grad_max: dict[str, float] = {}
        for b, batch in enumerate(make_batches(samples, config.batch_size, config.rng_seed, epoch)):
            targets = BatchTargets.from_samples(batch, cfg.num_attributes, cfg.num_landmarks)
            outputs = forward_full(model, stack_images(batch))
            try:
                breakdown = joint_loss(outputs, targets, tasks, config.weighting)
            except SimplexError as exc:
                # non-finite attribute weights only arise from blown-up parameters
                raise TrainingDiverged(epoch + 1, b + 1, math.nan, str(exc)) from exc
            value = breakdown.joint.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch + 1, b + 1, value)
            model.zero_grad()
            T.backward(breakdown.joint)
            for g, v in _group_grad_norms(model).items():
                grad_max[g] = max(grad_max.get(g, 0.0), v)
            _sgd_step(model, velocity, lr, config.momentum)

            nb = len(batch)
            for key, v in breakdown.as_dict().items():
                loss_sum[key] += v * nb
            for s, o in zip(STAGES, outputs):
                weight_sum[s] += o.dyn_weights.data.sum(axis=0)

        metrics.loss_trace.append({k: v / n_total for k, v in loss_sum.items()})
        metrics.weight_trace.append({s: (w / n_total).tolist() for s, w in weight_sum.items()})
        metrics.grad_norm_trace.append(grad_max)
        line = f"epoch {epoch + 1}/{config.epochs} lr={lr:g} loss={loss_sum['joint'] / n_total:.4f}"

        last = epoch == config.epochs - 1
        stop = False
        if config.eval_every and ((epoch + 1) % config.eval_every == 0 or last):
            acc = evaluate(model, samples, config.eval_thresholds).average_accuracy
            metrics.accuracy_trace.append((epoch + 1, acc))
            line += f" train_acc={acc:.4f}"
            stop = config.target_accuracy is not None and acc >= config.target_accuracy
        say(line + f" ({time.time() - t0:.1f}s)")
        if out is not None:
            model.save(out / f"checkpoint_{epoch + 1:03d}.npz")
        if stop:
            break

    final = evaluate(model, samples, config.eval_thresholds)
    metrics.per_attribute_accuracy = final.per_attribute_accuracy
    metrics.average_accuracy = final.average_accuracy
    metrics.num_evaluated, metrics.num_rejected = final.num_evaluated, final.num_rejected
    if out is not None:
        model.save(out / "model.npz")
        (out / "metrics.json").write_text(metrics.to_json() + "\n")
    return model, metrics


# --------------------------------------------------------------------------
# gradient check


GRADCHECK_CONFIG = ModelConfig(channel_scale=1 / 16, num_attributes=3, num_landmarks=5,
                               input_sides=(32, 16, 8), channels=1)


def _pick_entries(model: McfaModel, names: list[str], count: int,
                  rng: np.random.Generator) -> list[tuple[str, int]]:
    """Half the entries from those with a nonzero analytic gradient, the rest uniform."""
    flat = [(n, i) for n in names for i in range(model[n].size)]
    live = [(n, i) for n, i in flat
            if model[n].grad is not None and model[n].grad.reshape(-1)[i] != 0.0]
    n_live = min(len(live), (count + 1) // 2)
    chosen = [live[j] for j in rng.choice(len(live), n_live, replace=False)] if n_live else []
    rest = [flat[j] for j in rng.choice(len(flat), count - n_live, replace=False)]
    return chosen + rest


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float]
    checked: dict[str, int]
    tolerance: float

    @property
    def failures(self) -> list[str]:
        return [g for g, e in self.max_rel_error.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        rows = [f"{g:<14} n={self.checked[g]:<3} max_rel_err={e:.3e} "
                f"{'ok' if e < self.tolerance else 'FAIL'}"
                for g, e in sorted(self.max_rel_error.items())]
        return "\n".join(rows)


def gradcheck_batch(config: ModelConfig, rng: np.random.Generator) -> list[Sample]:
    """One random sample of each annotation kind."""
    side, c = config.input_sides[0], config.channels
    d, k = config.num_attributes, config.num_landmarks

    def img():
        return rng.uniform(0, 1, (c, side, side))

    def box():
        return rng.uniform(0.1, 0.6, 4)

    return [Sample(img(), NONFACE),
            Sample(img(), FACE, box=box()),
            Sample(img(), LANDMARK, box=box(), landmarks=rng.uniform(0, 1, 2 * k)),
            Sample(img(), ATTRIBUTE, box=box(), landmarks=rng.uniform(0, 1, 2 * k),
                   attributes=rng.integers(0, 2, d))]


def gradcheck(config: ModelConfig | None = None, rng_seed: int = 0, per_group: int = 4,
              eps: float = 1e-5, tolerance: float = 1e-3,
              loss_fn: Callable[[McfaModel, list[Sample]], T.Tensor] | None = None
              ) -> GradcheckReport:
    """Compare backprop gradients with central differences for sampled parameters.

    Samples ``per_group`` scalar entries in every parameter group (three
    bodies, four task heads per stage, three dynamic-weight heads). The
    relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    config = config or GRADCHECK_CONFIG
    rng = np.random.default_rng(rng_seed)
    model = McfaModel.create(config, seed=rng_seed)
    # random dynamic heads so their gradients are generic
    for s in STAGES:
        w = model[f"{s}.dynw.weight"]
        w.data[...] = rng.normal(0, 0.5, w.shape)
        model[f"{s}.dynw.bias"].data[...] = rng.normal(0, 0.5, config.num_attributes)
    batch = gradcheck_batch(config, rng)
    if loss_fn is None:
        def loss_fn(m, b):
            return joint_loss(forward_full(m, stack_images(b)), b).joint

    model.zero_grad()
    T.backward(loss_fn(model, batch))

    groups: dict[str, list[str]] = {}
    for name in model.params:
        groups.setdefault(param_group(name), []).append(name)

    errors: dict[str, float] = {}
    counts: dict[str, int] = {}
    for group, names in groups.items():
        worst = 0.0
        picks = _pick_entries(model, names, per_group, rng)
        for name, idx in picks:
            p = model[name]
            analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[idx])
            flat = p.data.reshape(-1)
            orig = flat[idx]
            with T.no_grad():
                flat[idx] = orig + eps
                up = loss_fn(model, batch).item()
                flat[idx] = orig - eps
                down = loss_fn(model, batch).item()
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
        errors[group] = worst
        counts[group] = len(picks)
    return GradcheckReport(errors, counts, tolerance)


# --------------------------------------------------------------------------
# ablation


@dataclass
class AblationReport:
    metrics: dict[str, Metrics]

    def table(self) -> str:
        variants = list(self.metrics)
        d = len(next(iter(self.metrics.values())).per_attribute_accuracy)
        head = f"{'variant':<14}" + "".join(f"  attr{q:<3}" for q in range(d)) + "  average  final_loss"
        rows = [head]
        for v in variants:
            m = self.metrics[v]
            accs = "".join(f"  {100 * a:6.2f}" for a in m.per_attribute_accuracy)
            final_loss = m.loss_trace[-1]["joint"] if m.loss_trace else float("nan")
            rows.append(f"{v:<14}{accs}  {100 * m.average_accuracy:7.2f}  {final_loss:10.4f}")
        return "\n".join(rows)


def ablate(base: TrainConfig, samples: Sequence[Sample], out_dir: str | Path | None = None,
           variants: Sequence[str] = ("MCFA_FAC", "MCFA_FD_FAC", "MCFA_FLL_FAC", "MCFA"),
           progress: Callable[[str], None] | None = None) -> AblationReport:
    """Train every variant with the same seed and hyperparameters."""
    results: dict[str, Metrics] = {}
    for v in variants:
        sub = Path(out_dir) / v if out_dir is not None else None
        _, m = train(base.replace(variant=v), samples, sub, progress)
        results[v] = m
    report = AblationReport(results)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "comparison.txt").write_text(report.table() + "\n")
        (out / "comparison.json").write_text(
            json.dumps({v: m.to_dict() for v, m in results.items()}, sort_keys=True) + "\n")
    return report
