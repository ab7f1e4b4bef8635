"""
Retrieval Evaluation
====================

Brute-force cosine ranking of reference tiles for each street query, then
R@k, R@1%, hit rate and meter-level accuracy.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .errors import ShapeError
from .geo import covers, geodesic_m_vectorized
from .tensor import Tensor

if TYPE_CHECKING:
    from .dataset import DatasetIndex

logger = logging.getLogger("Eval")

NORM_TOLERANCE = 1e-3
RECALL_KS = (1, 5, 10)
METRIC_NAMES = ["R@1", "R@5", "R@10", "R@1%", "hit_rate"]


@dataclass
class RetrievalResult:
    """
    ranked[q] holds the top-K reference indices of query q; gt_rank[q] is the
    1-based rank of its ground truth over all references (0 when absent).
    """
    query_ids: List[str]
    ref_ids: List[str]
    ranked: np.ndarray
    gt_rank: np.ndarray
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def n_refs(self) -> int:
        return len(self.ref_ids)

    def top_ids(self, q: int, k: int = 1) -> List[str]:
        return [self.ref_ids[i] for i in self.ranked[q, :k]]


def _as_unit_rows(x: Union[Tensor, np.ndarray], name: str) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a 2D matrix, got {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
        raise ValueError(f"{name} rows must be l2-normalized")
    return arr


def rank_references(queries: Union[Tensor, np.ndarray], refs: Union[Tensor, np.ndarray], k: int,
                    query_ids: Optional[Sequence[str]] = None,
                    ref_ids: Optional[Sequence[str]] = None) -> RetrievalResult:
    """
    Exact ranking by descending cosine similarity, ties to the ascending
    reference id. The ground truth of a query is the reference with the same
    id (by default query i matches reference i).
    """
    q = _as_unit_rows(queries, "queries")
    r = _as_unit_rows(refs, "refs")
    if q.shape[1] != r.shape[1]:
        raise ShapeError(f"embedding size {q.shape[1]} vs {r.shape[1]}")
    if k < 1:
        raise ValueError("k must be >= 1")
    query_ids = [str(i) for i in (query_ids if query_ids is not None else range(len(q)))]
    ref_ids = [str(i) for i in (ref_ids if ref_ids is not None else range(len(r)))]
    if len(query_ids) != len(q) or len(ref_ids) != len(r):
        raise ShapeError("id lists do not match the embedding rows")

    sims = q @ r.T
    if ref_ids == [str(i) for i in range(len(r))]:
        id_order = np.arange(len(r))
    else:
        id_order = np.argsort(np.argsort(np.array(ref_ids), kind="stable"), kind="stable")
    tie_key = np.broadcast_to(id_order, sims.shape)
    order = np.lexsort((tie_key, -sims), axis=-1)

    position = {rid: i for i, rid in enumerate(ref_ids)}
    gt_rank = np.zeros(len(q), dtype=np.int64)
    for qi, qid in enumerate(query_ids):
        gt = position.get(qid)
        if gt is not None:
            gt_rank[qi] = int(np.nonzero(order[qi] == gt)[0][0]) + 1
    return RetrievalResult(query_ids, ref_ids, order[:, :min(k, len(r))], gt_rank)


def recall_at_k(result: RetrievalResult, k: int) -> float:
    """Percentage of queries whose ground truth ranks in the top k"""
    if k < 1:
        raise ValueError("k must be >= 1")
    found = (result.gt_rank >= 1) & (result.gt_rank <= k)
    return 100.0 * float(found.mean()) if len(found) else 0.0


def one_percent_k(n_refs: int) -> int:
    return max(1, -(-n_refs // 100))


def recall_at_one_percent(result: RetrievalResult) -> float:
    return recall_at_k(result, one_percent_k(result.n_refs))


def hit_rate(result: RetrievalResult, index: "DatasetIndex") -> float:
    """
    Percentage of queries whose top-1 tile covers the query location: the
    ground truth, a declared neighbor, or any tile that geometrically covers.
    """
    if not result.query_ids:
        return 0.0
    hits = 0
    for qi, qid in enumerate(result.query_ids):
        top = result.top_ids(qi, 1)[0]
        try:
            record, candidate = index.by_id(qid), index.by_id(top)
        except KeyError as e:
            raise ValueError(f"no tile metadata for sample {e}") from e
        if top == qid or top in record.neighbors or covers(record.location, candidate.tile):
            hits += 1
    return 100.0 * hits / len(result.query_ids)


def meter_accuracy(distances_m: Sequence[float], thresholds_m: Sequence[float]) -> List[float]:
    """Percentage of distances strictly below each threshold"""
    thresholds = list(thresholds_m)
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be ascending")
    d = np.asarray(distances_m, dtype=np.float64)
    if d.size == 0:
        return [0.0 for _ in thresholds]
    return [100.0 * float(np.mean(d < t)) for t in thresholds]


def localization_errors_m(result: RetrievalResult, index: "DatasetIndex") -> np.ndarray:
    """Distance from each query to the center of its top-1 tile"""
    queries = [index.by_id(qid).location for qid in result.query_ids]
    preds = [index.by_id(result.top_ids(qi, 1)[0]).tile.center for qi in range(len(queries))]
    return geodesic_m_vectorized(
        np.array([g.lat for g in queries]), np.array([g.lon for g in queries]),
        np.array([p.lat for p in preds]), np.array([p.lon for p in preds]),
    )


def meter_curve(result: RetrievalResult, index: "DatasetIndex", thresholds_m: Sequence[float]) -> pd.DataFrame:
    """(threshold_m, accuracy) rows, non-decreasing in the threshold"""
    acc = meter_accuracy(localization_errors_m(result, index), thresholds_m)
    return pd.DataFrame({"threshold_m": list(thresholds_m), "accuracy": acc})


def metrics_frame(result: RetrievalResult, index: "DatasetIndex") -> pd.DataFrame:
    """One (metric, value) row per reported metric"""
    values = {f"R@{k}": recall_at_k(result, k) for k in RECALL_KS}
    values["R@1%"] = recall_at_one_percent(result)
    values["hit_rate"] = hit_rate(result, index)
    result.metrics.update(values)
    return pd.DataFrame({"metric": METRIC_NAMES, "value": [values[m] for m in METRIC_NAMES]})


def write_metrics(out_dir: Union[str, Path], split: str, result: RetrievalResult,
                  index: "DatasetIndex", thresholds_m: Sequence[float]) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out_dir / f"metrics_{split}.csv",
        "meter_curve": out_dir / f"meter_curve_{split}.csv",
    }
    frame = metrics_frame(result, index)
    frame.to_csv(paths["metrics"], index=False)
    meter_curve(result, index, thresholds_m).to_csv(paths["meter_curve"], index=False)
    summary = ", ".join(f"{m} {v:.2f}" for m, v in zip(frame["metric"], frame["value"]))
    logger.info(f"📊 {split}: {summary}")
    return paths
