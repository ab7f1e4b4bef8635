"""
Metric Learning
===============

Soft-margin triplet loss over every in-batch triplet, plus the batch
sampler that keeps neighboring aerial tiles out of the same batch.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Iterator, List, Sequence, Set, Tuple

import numpy as np

from .errors import BatchInfeasibleError, ShapeError
from .tensor import Tensor, concat, gather_rows, matmul, softplus

if TYPE_CHECKING:
    from .dataset import DatasetIndex

logger = logging.getLogger("Metric")

NORM_TOLERANCE = 1e-3
SHUFFLE_ATTEMPTS = 16


@dataclass(frozen=True)
class TripletLossConfig:
    """alpha scales the distance margin inside log(1 + e^x)"""
    alpha: float = 10.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass
class PairBatch:
    """Row i of street_emb and aerial_emb is a positive pair"""
    street_emb: Tensor
    aerial_emb: Tensor
    ids: List[str]

    def __post_init__(self):
        if self.street_emb.shape != self.aerial_emb.shape or self.street_emb.ndim != 2:
            raise ShapeError(f"embeddings {self.street_emb.shape} vs {self.aerial_emb.shape}")
        if len(self.ids) != self.street_emb.shape[0]:
            raise ShapeError(f"{len(self.ids)} ids for {self.street_emb.shape[0]} rows")
        for name, emb in (("street", self.street_emb), ("aerial", self.aerial_emb)):
            norms = np.linalg.norm(emb.data, axis=1)
            if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
                raise ValueError(f"{name} embeddings must be l2-normalized")

    @property
    def size(self) -> int:
        return len(self.ids)


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """(i, j) -> ||a_i - b_j||^2"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: {a.shape} vs {b.shape}")
    sq_a = (a * a).sum(axis=1, keepdims=True)
    sq_b = (b * b).sum(axis=1, keepdims=True).transpose(1, 0)
    return sq_a + sq_b - matmul(a, b.transpose(1, 0)) * 2.0


def soft_margin(diff: Tensor, alpha: float) -> Tensor:
    """log(1 + e^(alpha * (d_pos - d_neg))) per entry"""
    return softplus(diff * alpha)


def triplet_terms(batch: PairBatch, cfg: TripletLossConfig) -> Tensor:
    """
    All 2N(N-1) soft-margin terms: each street anchor against every
    non-matching aerial, then each aerial anchor against every non-matching
    street image.
    """
    n = batch.size
    if n < 2:
        raise ValueError(f"triplet loss needs N >= 2, got {n}")
    d = pairwise_sq_dist(batch.street_emb, batch.aerial_emb).reshape(n * n)
    ii, jj = np.nonzero(~np.eye(n, dtype=bool))
    d_pos = gather_rows(d, np.arange(n) * (n + 1))
    d_neg = gather_rows(d, ii * n + jj)
    street_anchor = gather_rows(d_pos, ii) - d_neg
    aerial_anchor = gather_rows(d_pos, jj) - d_neg
    return soft_margin(concat([street_anchor, aerial_anchor], axis=0), cfg.alpha)


def triplet_loss(batch: PairBatch, cfg: TripletLossConfig) -> Tensor:
    """Mean over the exhaustive triplet set"""
    return triplet_terms(batch, cfg).mean()


def _greedy_fill(queue: List[str], footprint: Dict[str, Set[str]], batch_size: int) -> Tuple[List[str], List[str]]:
    """First batch_size mutually non-touching samples in queue order, plus the deferred rest"""
    batch: List[str] = []
    taken: Set[str] = set()
    deferred: List[str] = []
    for sid in queue:
        if len(batch) < batch_size and not (footprint[sid] & taken):
            batch.append(sid)
            taken |= footprint[sid]
        else:
            deferred.append(sid)
    return batch, deferred


def make_batches(index: "DatasetIndex", batch_size: int, seed: int,
                 ids: Sequence[str] = None) -> Iterator[List[str]]:
    """
    One epoch of batches: seeded shuffle, then greedy fill where a sample is
    deferred to a later batch if its tile or neighbor set touches one already
    in the batch. Each sample appears at most once; an incomplete tail is
    dropped. When the greedy pass cannot fill even the first batch, up to
    SHUFFLE_ATTEMPTS further seeded orders are tried before giving up.
    """
    ids = list(ids) if ids is not None else [r.id for r in index.records]
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    if batch_size > len(ids):
        raise BatchInfeasibleError(f"batch size {batch_size} exceeds {len(ids)} samples")

    footprint: Dict[str, Set[str]] = {i: index.footprint(i) for i in ids}
    rng = np.random.default_rng(seed)
    for attempt in range(SHUFFLE_ATTEMPTS + 1):
        queue = [ids[k] for k in rng.permutation(len(ids))]
        batch, deferred = _greedy_fill(queue, footprint, batch_size)
        if len(batch) == batch_size:
            break
        logger.debug(f"order {attempt} cannot fill a batch of {batch_size}, reshuffling")
    else:
        raise BatchInfeasibleError(
            f"no batch of {batch_size} non-neighboring samples found in {SHUFFLE_ATTEMPTS + 1} orders; "
            f"reduce the batch size"
        )

    while len(batch) == batch_size:
        yield batch
        queue = deferred
        if len(queue) < batch_size:
            return
        batch, deferred = _greedy_fill(queue, footprint, batch_size)
    logger.debug(f"dropping {len(queue)} samples that cannot fill a batch")
