"""Overfit the eighth-scale model on a 32-sample synthetic set.

    python scripts/run_overfit.py --out runs/overfit --weighting dynamic
    python scripts/run_overfit.py --out runs/overfit_uniform --weighting fixed-uniform

Prints per-epoch losses, the training accuracy every ``--eval-every``
epochs, and the final per-attribute accuracies and mean attribute weights
per stage.
"""
import argparse
from pathlib import Path

import numpy as np

from mcfa.data import load_manifest
from mcfa.model import ModelConfig
from mcfa.synth import ATTRIBUTE_NAMES, generate_synthetic
from mcfa.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/overfit"))
    ap.add_argument("--variant", default="MCFA")
    ap.add_argument("--weighting", default="dynamic", choices=("dynamic", "fixed-uniform"))
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--batch-size", type=int, default=4)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-every", type=int, default=10)
    ap.add_argument("--target", type=float, default=None, help="stop once train accuracy reaches this")
    args = ap.parse_args()

    manifest = args.out / "data" / "manifest.txt"
    if not manifest.exists():
        generate_synthetic(args.out / "data", 32, seed=0, side=64, num_attributes=4)
    samples = load_manifest(manifest, 4).materialize(64)

    config = TrainConfig(variant=args.variant, learning_rate=args.lr, epochs=args.epochs,
                         batch_size=args.batch_size, rng_seed=args.seed, weighting=args.weighting,
                         model=ModelConfig(channel_scale=1 / 8, num_attributes=4,
                                           input_sides=(64, 32, 16)),
                         eval_every=args.eval_every, target_accuracy=args.target)
    _, metrics = train(config, samples, args.out / "model", progress=print)
    print(metrics.table(list(ATTRIBUTE_NAMES[:4])))
    for stage, mu in metrics.weight_trace[-1].items():
        print(f"{stage} mean attribute weights {np.round(mu, 3).tolist()}")


if __name__ == "__main__":
    main()
