"""
Tests for retrieval ranking and the reported metrics.
"""

import numpy as np
import pandas as pd
import pytest

from crossview.dataset import DatasetIndex, DatasetModes, SampleRecord
from crossview.errors import ShapeError
from crossview.evaluate import (
    METRIC_NAMES,
    RetrievalResult,
    hit_rate,
    localization_errors_m,
    meter_accuracy,
    meter_curve,
    one_percent_k,
    rank_references,
    recall_at_k,
    recall_at_one_percent,
    write_metrics,
)
from crossview.geo import AerialTile, offset_to_geo


def unit_rows(rng, n, d=8):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def result_with_ranks(gt_rank, n_refs=20):
    n = len(gt_rank)
    return RetrievalResult([str(i) for i in range(n)], [str(i) for i in range(n_refs)],
                           np.zeros((n, 1), dtype=np.int64), np.asarray(gt_rank))


def small_index():
    """Four 100 m tiles along the east axis; b declares c as a neighbor"""
    def record(sid, east, query_east, neighbors=()):
        center = offset_to_geo(east, 0.0)
        return SampleRecord(sid, f"street/{sid}.ppm", f"aerial/{sid}.ppm", offset_to_geo(query_east, 0.0),
                            AerialTile(center, 100.0, 8), (query_east - east, 0.0), "test", neighbors)

    return DatasetIndex([
        record("a", 0.0, 0.0),
        record("b", 100.0, 100.0, neighbors=("c",)),
        record("c", 200.0, 240.0),
        record("d", 400.0, 400.0),
    ], DatasetModes(offset=True))


def result_with_top(top_ids, index):
    ref_ids = [r.id for r in index.records]
    ranked = np.array([[ref_ids.index(t)] for t in top_ids])
    return RetrievalResult([r.id for r in index.records], ref_ids, ranked, np.ones(len(ref_ids), dtype=np.int64))


# =============================================================================
# Ranking
# =============================================================================

class TestRanking:

    def test_identical_embeddings_rank_first(self):
        emb = unit_rows(np.random.default_rng(0), 12)
        result = rank_references(emb, emb, k=5)
        np.testing.assert_array_equal(result.gt_rank, 1)
        np.testing.assert_array_equal(result.ranked[:, 0], np.arange(12))
        assert recall_at_k(result, 1) == 100.0

    def test_ties_fall_back_to_reference_id(self):
        refs = np.eye(4)[:3]
        query = np.eye(4)[3:]
        result = rank_references(query, refs, k=3, query_ids=["q"], ref_ids=["c", "a", "b"])
        assert result.top_ids(0, 3) == ["a", "b", "c"]
        assert result.gt_rank[0] == 0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        q, r = unit_rows(rng, 5), unit_rows(rng, 5)
        result = rank_references(q, r, k=5)
        sims = q @ r.T
        for i in range(5):
            expected = sorted(range(5), key=lambda j: (-sims[i, j], j))
            assert result.ranked[i].tolist() == expected
            assert result.gt_rank[i] == expected.index(i) + 1

    def test_rotation_invariance(self):
        rng = np.random.default_rng(2)
        q, r = unit_rows(rng, 10), unit_rows(rng, 30)
        rotation, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        a = rank_references(q, r, k=30)
        b = rank_references(q @ rotation, r @ rotation, k=30)
        np.testing.assert_array_equal(a.ranked, b.ranked)

    def test_k_larger_than_gallery(self):
        emb = unit_rows(np.random.default_rng(3), 4)
        assert rank_references(emb, emb, k=10).ranked.shape == (4, 4)

    def test_input_validation(self):
        emb = unit_rows(np.random.default_rng(4), 3)
        with pytest.raises(ValueError, match="l2-normalized"):
            rank_references(emb * 2.0, emb, k=1)
        with pytest.raises(ShapeError):
            rank_references(emb, unit_rows(np.random.default_rng(5), 3, d=4), k=1)
        with pytest.raises(ValueError):
            rank_references(emb, emb, k=0)


# =============================================================================
# Recall
# =============================================================================

class TestRecall:

    def test_recall_at_k(self):
        result = result_with_ranks([1, 3, 0, 11])
        assert recall_at_k(result, 1) == 25.0
        assert recall_at_k(result, 5) == 50.0
        assert recall_at_k(result, 10) == 50.0
        assert recall_at_k(result, 11) == 75.0

    def test_recall_is_monotone(self):
        result = result_with_ranks(np.random.default_rng(0).integers(0, 21, size=50))
        recalls = [recall_at_k(result, k) for k in range(1, 21)]
        assert recalls == sorted(recalls)

    @pytest.mark.parametrize("n_refs,k", [(1, 1), (99, 1), (100, 1), (101, 2), (250, 3), (8884, 89)])
    def test_one_percent_k(self, n_refs, k):
        assert one_percent_k(n_refs) == k

    def test_recall_at_one_percent(self):
        result = result_with_ranks([1, 3, 4], n_refs=250)
        assert recall_at_one_percent(result) == pytest.approx(200.0 / 3)

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            recall_at_k(result_with_ranks([1]), 0)


# =============================================================================
# Hit rate and meter-level accuracy
# =============================================================================

class TestHitRate:

    def test_ground_truth_neighbor_and_coverage(self):
        index = small_index()
        # own tile, declared neighbor, two misses
        result = result_with_top(["a", "c", "b", "c"], index)
        assert hit_rate(result, index) == 50.0

    def test_other_tiles_miss(self):
        index = small_index()
        result = result_with_top(["a", "b", "c", "d"], index)
        assert hit_rate(result, index) == 100.0
        undeclared = result_with_top(["b", "a", "c", "d"], index)
        assert hit_rate(undeclared, index) == 50.0

    def test_boundary_tile_covers(self):
        index = DatasetIndex([
            SampleRecord("x", "s", "a", offset_to_geo(50.0, 0.0), AerialTile(offset_to_geo(0.0, 0.0), 100.0, 8),
                         (50.0, 0.0), "test"),
            SampleRecord("y", "s", "a", offset_to_geo(150.0, 0.0), AerialTile(offset_to_geo(100.0, 0.0), 100.0, 8),
                         (50.0, 0.0), "test"),
        ], DatasetModes(offset=True))
        result = result_with_top(["y", "x"], index)
        # x's query at 50 m lies on y's western edge
        assert hit_rate(result, index) == 50.0

    def test_missing_metadata(self):
        index = small_index()
        result = RetrievalResult(["a"], ["zzz"], np.array([[0]]), np.array([0]))
        with pytest.raises(ValueError, match="metadata"):
            hit_rate(result, index)


class TestMeterAccuracy:

    def test_strictly_below_threshold(self):
        assert meter_accuracy([5.0, 15.0, 50.0], [5.0, 20.0, 100.0]) == pytest.approx([0.0, 200.0 / 3, 100.0])

    def test_descending_thresholds_rejected(self):
        with pytest.raises(ValueError):
            meter_accuracy([1.0], [10.0, 5.0])

    def test_empty(self):
        assert meter_accuracy([], [1.0, 2.0]) == [0.0, 0.0]

    def test_curve_is_monotone(self):
        index = small_index()
        result = result_with_top(["a", "a", "d", "b"], index)
        errors = localization_errors_m(result, index)
        assert errors == pytest.approx([0.0, 100.0, 160.0, 300.0], abs=1e-3)
        curve = meter_curve(result, index, [1, 50, 101, 200, 500])
        assert curve["accuracy"].tolist() == pytest.approx([25.0, 25.0, 50.0, 75.0, 100.0])
        assert curve["accuracy"].is_monotonic_increasing


class TestWriteMetrics:

    def test_files_and_rows(self, tmp_path):
        index = small_index()
        result = result_with_top(["a", "b", "c", "d"], index)
        paths = write_metrics(tmp_path, "test", result, index, [10.0, 100.0])
        metrics = pd.read_csv(paths["metrics"])
        assert paths["metrics"].name == "metrics_test.csv"
        assert metrics["metric"].tolist() == METRIC_NAMES
        assert metrics.set_index("metric").loc["hit_rate", "value"] == 100.0
        curve = pd.read_csv(paths["meter_curve"])
        assert list(curve.columns) == ["threshold_m", "accuracy"]
        assert curve["accuracy"].tolist() == [75.0, 100.0]
        assert result.metrics["hit_rate"] == 100.0
