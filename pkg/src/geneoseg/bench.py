"""Non-learned baseline and structured experiments: template matching, AP,
and the operator-multiset ablation grid.

The template baseline correlates the occupancy grid with a fixed binarized
cylinder shell (zero-mean, unit-L2) and scores detection quality by average
precision over all voxels, which is what a geometric matched filter buys
without any training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import training
from .conv import conv3d
from .training import TrainConfig


@dataclass
class TemplateConfig:
    radius: float                               # cylinder radius, voxels
    shape: tuple[int, int, int] = (9, 9, 9)

    def validate(self) -> None:
        if self.radius <= 0:
            raise ValueError("template radius must be positive")
        if any(s < 1 for s in self.shape):
            raise ValueError(f"invalid template shape {self.shape}")


def cylinder_template(config: TemplateConfig) -> np.ndarray:
    """Binarized cylinder shell, zero-mean and unit-L2 for comparable scores."""
    config.validate()
    kz, ky, kx = config.shape
    yy, xx = np.meshgrid(np.arange(ky, dtype=np.float64), np.arange(kx, dtype=np.float64),
                         indexing="ij")
    d = np.hypot(yy - (ky - 1) / 2.0, xx - (kx - 1) / 2.0)
    shell = (np.abs(d - config.radius) <= 0.5).astype(np.float64)
    if shell.sum() == 0:
        raise ValueError(f"radius {config.radius} leaves no shell voxels in a {ky}x{kx} footprint")
    template = np.broadcast_to(shell, (kz, ky, kx)).copy()
    template -= template.mean()
    norm = np.linalg.norm(template)
    if norm == 0:
        raise ValueError("degenerate template: shell covers the whole footprint")
    return template / norm


def template_match(grid: np.ndarray, labels: np.ndarray, config: TemplateConfig,
                   method: str = "auto") -> tuple[np.ndarray, float]:
    """(per-voxel matched-filter scores, average precision against labels)."""
    grid = np.asarray(grid, dtype=np.float64)
    template = cylinder_template(config)
    if any(k > g for k, g in zip(template.shape, grid.shape)):
        raise ValueError(f"template {template.shape} larger than grid {grid.shape}")
    scores = conv3d(grid, template, method=method)
    ap = average_precision(scores.ravel(), np.asarray(labels).ravel())
    return scores, ap


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the precision-recall curve over descending score thresholds.

    Step interpolation over distinct scores; ties enter together. No positive
    labels gives 0 by the same 0/0 convention as the other metrics.
    """
    scores = np.asarray(scores).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores ({scores.shape}) and labels ({labels.shape}) differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    y = labels[order]
    s = scores[order]
    tp = np.cumsum(y)
    ranks = np.arange(1, len(s) + 1)
    # keep only the last index of each tie group: valid operating points
    boundary = np.append(np.nonzero(np.diff(s))[0], len(s) - 1)
    precision = tp[boundary] / ranks[boundary]
    recall = tp[boundary] / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


ABLATION_ROWS: list[tuple[str, tuple[int, int, int]]] = [
    ("A", (1, 0, 0)),
    ("B", (0, 1, 0)),
    ("C", (1, 0, 1)),
    ("D", (0, 1, 1)),
    ("E", (1, 1, 1)),
    ("F", (2, 2, 2)),
    ("G", (3, 3, 3)),
]


def row_kinds(counts: tuple[int, int, int]) -> list[str]:
    n_cy, n_ar, n_ns = counts
    return ["cylinder"] * n_cy + ["arrow"] * n_ar + ["negsphere"] * n_ns


def run_ablation(
    train_scenes: list,
    val_scenes: list,
    config: TrainConfig,
    seeds: tuple[int, ...] = (0,),
    rows: list[tuple[str, tuple[int, int, int]]] = ABLATION_ROWS,
) -> list[dict]:
    """Train one model per (row, seed) under a shared protocol.

    Every run shares the training/validation splits, the optimization
    protocol, and the seed; only the operator multiset differs. Returns one
    record per run with the validation metrics of the tuned model.
    """
    results = []
    for seed in seeds:
        for name, counts in rows:
            rng = np.random.default_rng([seed, 0xAB1A7E])
            init = training.init_from_kinds(rng, row_kinds(counts), config.kernel_shape)
            params, _ = training.train(train_scenes, val_scenes, config, seed=seed, init=init)
            metrics = training.evaluate(params, val_scenes, level="voxel")
            results.append({
                "row": name,
                "counts": counts,
                "seed": seed,
                "tau": params.tau,
                "metrics": metrics,
            })
    return results


def ablation_table(results: list[dict]) -> list[dict]:
    """Mean metrics per row across seeds, in the fixed 7-row order."""
    table = []
    for name, counts in ABLATION_ROWS:
        rows = [r for r in results if r["row"] == name]
        if not rows:
            continue
        table.append({
            "row": name,
            "counts": counts,
            "precision": float(np.mean([r["metrics"].precision for r in rows])),
            "recall": float(np.mean([r["metrics"].recall for r in rows])),
            "iou": float(np.mean([r["metrics"].iou for r in rows])),
            "n_seeds": len(rows),
        })
    return table
