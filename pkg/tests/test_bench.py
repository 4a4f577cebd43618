import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geneoseg import bench
from geneoseg.bench import (
    ABLATION_ROWS,
    TemplateConfig,
    ablation_table,
    average_precision,
    cylinder_template,
    run_ablation,
    template_match,
)
from geneoseg.training import TrainConfig


# ----------------------------------------------------------------- template

def test_template_zero_mean_unit_l2():
    t = cylinder_template(TemplateConfig(radius=2.0, shape=(9, 9, 9)))
    assert abs(t.sum()) <= 1e-12
    assert np.linalg.norm(t) == pytest.approx(1.0)


def test_template_radius_outside_footprint():
    with pytest.raises(ValueError, match="shell"):
        cylinder_template(TemplateConfig(radius=10.0, shape=(9, 9, 9)))
    with pytest.raises(ValueError):
        cylinder_template(TemplateConfig(radius=-1.0))


def test_template_matched_filter_peak():
    cfg = TemplateConfig(radius=2.0, shape=(5, 7, 7))
    t = cylinder_template(cfg)
    shell = (t > 0).astype(float)      # the template's own shell pattern
    grid = np.zeros((13, 15, 15))
    grid[4:9, 4:11, 4:11] = shell
    scores, _ = template_match(grid, np.zeros_like(grid), cfg)
    peak = np.unravel_index(np.argmax(scores), scores.shape)
    assert peak == (6, 7, 7)           # alignment voxel


def test_template_all_zero_grid():
    cfg = TemplateConfig(radius=1.5, shape=(5, 5, 5))
    scores, ap = template_match(np.zeros((10, 10, 10)), np.zeros((10, 10, 10)), cfg)
    assert not scores.any()
    assert ap == 0.0


def test_template_larger_than_grid():
    with pytest.raises(ValueError, match="larger"):
        template_match(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), TemplateConfig(1.0, (9, 9, 9)))


# ----------------------------------------------------------- average precision

def ap_oracle(scores, labels):
    """Exhaustive threshold sweep, one threshold per distinct score."""
    labels = labels.astype(bool)
    n_pos = labels.sum()
    if n_pos == 0:
        return 0.0
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = int((pred & labels).sum())
        fp = int((pred & ~labels).sum())
        precision = tp / (tp + fp)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def test_ap_perfect_ranking():
    scores = np.array([0.9, 0.8, 0.7, 0.2, 0.1])
    labels = np.array([1, 1, 1, 0, 0])
    assert average_precision(scores, labels) == pytest.approx(1.0)


def test_ap_no_positives():
    assert average_precision(np.array([0.5, 0.2]), np.array([0, 0])) == 0.0


def test_ap_worst_ranking():
    scores = np.array([0.1, 0.9, 0.8])
    labels = np.array([1, 0, 0])
    assert average_precision(scores, labels) == pytest.approx(1.0 / 3.0)


def test_ap_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        average_precision(np.zeros(3), np.zeros(4))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2**32 - 1), st.booleans())
def test_ap_matches_exhaustive_oracle(n, seed, with_ties):
    rng = np.random.default_rng(seed)
    scores = rng.random(n)
    if with_ties:
        scores = np.round(scores, 1)    # force duplicate scores
    labels = rng.random(n) < 0.4
    assert average_precision(scores, labels) == pytest.approx(ap_oracle(scores, labels), abs=1e-12)


# ------------------------------------------------------------------ ablation

def tiny_scenes(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        occ = (rng.random((12, 12, 12)) < 0.05).astype(np.float64)
        y, x = rng.integers(2, 10), rng.integers(2, 10)
        occ[:, y, x] = 1.0
        lab = np.zeros((12, 12, 12))
        lab[:, y, x] = 1.0
        out.append((occ, lab))
    return out


def test_ablation_rows_structure():
    assert [name for name, _ in ABLATION_ROWS] == list("ABCDEFG")
    assert ABLATION_ROWS[4] == ("E", (1, 1, 1))
    assert bench.row_kinds((2, 0, 1)) == ["cylinder", "cylinder", "negsphere"]


def test_run_ablation_smoke():
    config = TrainConfig(epochs=1, batch_size=4, kernel_shape=(5, 5, 5))
    results = run_ablation(tiny_scenes(6, 0), tiny_scenes(2, 9), config, seeds=(0,))
    assert len(results) == 7
    assert [r["row"] for r in results] == list("ABCDEFG")
    for r in results:
        assert 0.0 <= r["metrics"].iou <= 1.0
    table = ablation_table(results)
    assert len(table) == 7
    assert all(t["n_seeds"] == 1 for t in table)


def test_ablation_lambda_init_ranges():
    import numpy as np
    from geneoseg import training as T
    rng = np.random.default_rng(0)
    params = T.init_from_kinds(rng, bench.row_kinds((2, 2, 2)), (9, 9, 9))
    assert len(params.lambda_free) == 5
    assert np.all(params.lambda_free <= 2.0 / 5 + 1e-12)
    single = T.init_from_kinds(rng, bench.row_kinds((1, 0, 0)), (9, 9, 9))
    assert len(single.operators) == 1
    assert single.lambdas.tolist() == [1.0]
