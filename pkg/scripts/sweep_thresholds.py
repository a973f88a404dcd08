"""Sweep the cascade thresholds for a checkpoint over a manifest.

    python scripts/sweep_thresholds.py --model runs/overfit/model/model.npz \
        --manifest runs/overfit/data/manifest.txt

For each (t_s, t_m) prints the average attribute accuracy, how many
samples each stage rejected, and how many M_Net / L_Net evaluations ran.
"""
import argparse
import itertools

import numpy as np

from mcfa.cascade import CascadeThresholds, batch_predict
from mcfa.data import load_manifest
from mcfa.model import McfaModel
from mcfa.trainer import evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", required=True)
    ap.add_argument("--manifest", required=True)
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args()

    model = McfaModel.load(args.model)
    c = model.config
    samples = load_manifest(args.manifest, c.num_attributes, c.num_landmarks).materialize(
        c.input_sides[0], c.channels)
    grid = np.linspace(0, 1, args.steps)
    print(f"{'t_s':>5} {'t_m':>5} {'acc':>7} {'rej_s':>6} {'rej_m':>6} {'m_evals':>8} {'l_evals':>8}")
    for t_s, t_m in itertools.product(grid, grid):
        th = CascadeThresholds(float(t_s), float(t_m))
        _, stats = batch_predict(model, samples, th)
        acc = evaluate(model, samples, th).average_accuracy
        print(f"{t_s:5.2f} {t_m:5.2f} {acc:7.4f} {stats.reject_s:6d} {stats.reject_m:6d} "
              f"{stats.evals['mnet']:8d} {stats.evals['lnet']:8d}")


if __name__ == "__main__":
    main()
