"""Command-line entry point: ``mcfa <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .cascade import CascadeThresholds, predict
from .data import load_manifest, read_image, resize_image
from .model import McfaModel
from .synth import generate_synthetic
from .trainer import TrainConfig, ablate, evaluate, gradcheck, train


def _thresholds(args, default: CascadeThresholds = CascadeThresholds()) -> CascadeThresholds:
    return CascadeThresholds(default.t_s if args.ts is None else args.ts,
                             default.t_m if args.tm is None else args.tm)


def _samples(manifest: str, num_attributes: int, num_landmarks: int, side: int, channels: int):
    return load_manifest(manifest, num_attributes, num_landmarks).materialize(side, channels)


def _training_samples(config: TrainConfig, manifest: str):
    m = config.model
    return _samples(manifest, m.num_attributes, m.num_landmarks, m.input_sides[0], m.channels)


def cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config)
    _, metrics = train(config, _training_samples(config, args.manifest), args.out, print)
    print(metrics.table())
    print(f"model written to {Path(args.out) / 'model.npz'}")
    return 0


def cmd_eval(args) -> int:
    model = McfaModel.load(args.model)
    c = model.config
    samples = _samples(args.manifest, c.num_attributes, c.num_landmarks, c.input_sides[0], c.channels)
    metrics = evaluate(model, samples, _thresholds(args))
    print(metrics.table())
    print("\n".join(metrics.key_values()))
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck(rng_seed=args.seed)
    print(report.summary())
    if not report.passed:
        print(f"gradcheck failed in: {', '.join(report.failures)}", file=sys.stderr)
        return 1
    print("gradcheck passed")
    return 0


def cmd_ablate(args) -> int:
    config = TrainConfig.from_file(args.config)
    report = ablate(config, _training_samples(config, args.manifest), args.out, progress=print)
    print(report.table())
    return 0


def cmd_predict(args) -> int:
    model = McfaModel.load(args.model)
    c = model.config
    image = resize_image(read_image(args.image, c.channels), c.input_sides[0])
    print(predict(model, image, _thresholds(args)).to_json())
    return 0


def cmd_synth(args) -> int:
    path = generate_synthetic(args.out, args.n, seed=args.seed, side=args.side,
                              num_attributes=args.attributes, num_landmarks=args.landmarks,
                              channels=args.channels)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcfa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file and manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="attribute accuracy of a checkpoint on a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ts", type=float)
    p.add_argument("--tm", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and compare the four task variants")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="run the cascade on one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--ts", type=float)
    p.add_argument("--tm", type=float)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="write a synthetic dataset and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--attributes", type=int, default=4)
    p.add_argument("--landmarks", type=int, default=5)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"mcfa {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
