"""Operator-multiset ablation: which kernels earn their keep.

Trains the seven standard configurations (single operators, pairs with the
negative sphere, the full model, and duplicated stacks) under a shared
protocol across several seeds, and reports per-row validation metrics.

Usage: python scripts/run_ablation.py --data DIR [--seeds 3] [--epochs 60]
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from geneoseg import bench, synth, training


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", default="./synthetic_bench")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--grid", type=int, default=64)
    args = ap.parse_args()

    manifest = synth.load_manifest(os.path.join(args.data, "manifest.json"))
    shape = (args.grid,) * 3
    train_scenes = synth.load_split(manifest, "train", shape)
    val_scenes = synth.load_split(manifest, "val", shape)
    config = training.TrainConfig(epochs=args.epochs, batch_size=args.batch)

    results = bench.run_ablation(train_scenes, val_scenes, config,
                                 seeds=tuple(range(args.seeds)))
    print(f"{'row':<4}{'cy':>3}{'ar':>3}{'ns':>3}  {'precision':>9} {'recall':>7} {'iou':>7}")
    for row in bench.ablation_table(results):
        c = row["counts"]
        print(f"{row['row']:<4}{c[0]:>3}{c[1]:>3}{c[2]:>3}  "
              f"{row['precision']:>9.3f} {row['recall']:>7.3f} {row['iou']:>7.3f}")
    for seed in range(args.seeds):
        per_seed = [r for r in results if r["seed"] == seed]
        best = max(per_seed, key=lambda r: r["metrics"].iou)
        print(f"seed {seed}: best row {best['row']} (IoU {best['metrics'].iou:.3f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
