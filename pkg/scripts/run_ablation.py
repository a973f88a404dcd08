"""Train the four task variants on a synthetic set and print the comparison table.

    python scripts/run_ablation.py --out runs/ablation --n 64 --epochs 40
"""
import argparse
from pathlib import Path

from mcfa.data import load_manifest
from mcfa.model import ModelConfig
from mcfa.synth import generate_synthetic
from mcfa.trainer import TrainConfig, ablate


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--weighting", default="dynamic", choices=("dynamic", "fixed-uniform"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    manifest = generate_synthetic(args.out / "data", args.n, seed=args.seed, side=64, num_attributes=4)
    samples = load_manifest(manifest, 4).materialize(64)
    base = TrainConfig(epochs=args.epochs, batch_size=4, rng_seed=args.seed, weighting=args.weighting,
                       model=ModelConfig(channel_scale=1 / 8, num_attributes=4, input_sides=(64, 32, 16)))
    report = ablate(base, samples, args.out, progress=print)
    print(report.table())


if __name__ == "__main__":
    main()
