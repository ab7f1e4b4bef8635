"""
Attention-guided non-uniform cropping
=====================================

"Attend and zoom-in": raise the aerial resolution by sqrt(gamma), resize the
stage-1 attention map to the new grid, keep the floor(beta * N') most
attended patches, and drop the rest without touching the survivors'
position rows. Also home of the analytic FLOP model.
"""

import math
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import CropBudgetError, ShapeError
from .sampling import resize_grid
from .tensor import gather_rows
from .vit import AttentionMap, GridShape, TokenSet, ViTConfig

DEFAULT_BUDGET = 1.0 + 1e-6
# guards floor() against products like 0.29 * 100 = 28.999999999999996
FLOOR_SLACK = 1e-9


@dataclass(frozen=True)
class CropPolicy:
    """Keep fraction beta and token-count scale gamma"""
    beta: float = 0.64
    gamma: float = 1.0
    patch_size: int = 16
    budget: float = DEFAULT_BUDGET

    def __post_init__(self):
        errors = []
        if not 0.0 < self.beta <= 1.0:
            errors.append(f"beta must be in (0, 1], got {self.beta}")
        if self.gamma < 1.0:
            errors.append(f"gamma must be >= 1, got {self.gamma}")
        if self.patch_size < 1:
            errors.append("patch_size must be positive")
        if errors:
            raise ValueError("Crop policy errors:\n" + "\n".join(f"- {e}" for e in errors))
        if self.beta * self.gamma > self.budget:
            raise CropBudgetError(
                f"beta*gamma = {self.beta * self.gamma:.4f} exceeds budget {self.budget:.4f}"
            )

    def scaled_grid(self, side_px: int) -> Tuple[int, GridShape]:
        return scaled_grid(side_px, self.gamma, self.patch_size)

    def keep_count(self, side_px: int) -> int:
        _, (rows, cols) = self.scaled_grid(side_px)
        return keep_count(self.beta, rows * cols)


@dataclass
class TokenMask:
    """Kept row-major patch indices on a (gamma-scaled) grid"""
    grid_shape: GridShape
    kept: List[int]

    def __post_init__(self):
        rows, cols = self.grid_shape
        kept = np.asarray(self.kept, dtype=np.int64)
        if kept.size and (kept.min() < 0 or kept.max() >= rows * cols):
            raise ValueError(f"kept index outside grid {self.grid_shape}")
        if len(np.unique(kept)) != len(kept):
            raise ValueError("kept indices must be unique")
        self.kept = [int(i) for i in kept]


@dataclass(frozen=True)
class FlopReport:
    """Multiply-add counts for one encoder forward over n tokens"""
    n_tokens: int
    layers: int
    projection: int
    attention_score: int
    attention_apply: int
    mlp: int
    patch_embed: int
    head: int

    @property
    def per_layer(self) -> int:
        return self.projection + self.attention_score + self.attention_apply + self.mlp

    @property
    def total(self) -> int:
        return self.per_layer * self.layers + self.patch_embed + self.head

    def to_frame(self) -> pd.DataFrame:
        rows = [{"n_tokens": self.n_tokens, "term": term, "macs": value}
                for term, value in asdict(self).items() if term not in ("n_tokens", "layers")]
        rows.append({"n_tokens": self.n_tokens, "term": "per_layer", "macs": self.per_layer})
        rows.append({"n_tokens": self.n_tokens, "term": "total", "macs": self.total})
        return pd.DataFrame(rows)


def scaled_grid(side_px: int, gamma: float, patch_size: int) -> Tuple[int, GridShape]:
    """round(side * sqrt(gamma)) rounded up to a multiple of the patch size"""
    if gamma < 1.0:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    if side_px % patch_size:
        raise ValueError(f"side {side_px} not divisible by patch size {patch_size}")
    scaled = int(round(side_px * math.sqrt(gamma)))
    new_side = -(-scaled // patch_size) * patch_size
    cells = new_side // patch_size
    return new_side, (cells, cells)


def keep_count(beta: float, n_patches: int) -> int:
    return int(math.floor(beta * n_patches + FLOOR_SLACK))


def resize_attention(attn: AttentionMap, new_grid: GridShape) -> AttentionMap:
    """Bilinear resample of the score field; nonnegativity preserved"""
    if tuple(new_grid) == tuple(attn.grid_shape):
        return AttentionMap(attn.grid_shape, attn.values.copy(), attn.class_weight)
    resized = resize_grid(attn.as_grid(), new_grid)
    return AttentionMap(tuple(new_grid), np.maximum(resized, 0.0), attn.class_weight)


def select_tokens(attn: AttentionMap, beta: float) -> TokenMask:
    """Keep the floor(beta*N) highest-scoring patches, lower index on ties"""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must be in (0, 1], got {beta}")
    n = attn.values.size
    count = keep_count(beta, n)
    if count == 0:
        raise ValueError(f"beta={beta} keeps no patch of {n}")
    order = np.lexsort((np.arange(n), -attn.values))
    return TokenMask(attn.grid_shape, sorted(order[:count].tolist()))


def crop_tokens(tokens: TokenSet, mask: Union[TokenMask, Sequence[TokenMask]]) -> TokenSet:
    """
    Gather the class token and the kept patch rows. A batched TokenSet takes
    one mask per image (or one mask shared by all); every mask must keep the
    same number of patches.
    """
    masks = [mask] if isinstance(mask, TokenMask) else list(mask)
    n_images = tokens.tokens.shape[0] if tokens.batched else 1
    if len(masks) == 1 and n_images > 1:
        masks = masks * n_images
    if len(masks) != n_images:
        raise ShapeError(f"{len(masks)} masks for {n_images} images")
    for m in masks:
        if tuple(m.grid_shape) != tuple(tokens.grid_shape):
            raise ShapeError(f"mask grid {m.grid_shape} vs token grid {tokens.grid_shape}")
    if len({len(m.kept) for m in masks}) > 1:
        raise ShapeError("masks in one batch must keep the same number of patches")

    flat = tokens.flat_indices().reshape(n_images, -1)
    pos = tokens.grid_positions.reshape(n_images, -1, 2)
    rows, positions = [], []
    for b, m in enumerate(masks):
        where = {int(f): i for i, f in enumerate(flat[b])}
        missing = [k for k in m.kept if k not in where]
        if missing:
            raise ValueError(f"mask keeps patches {missing[:5]} absent from the TokenSet")
        idx = [where[k] for k in m.kept]
        rows.append([0] + [i + 1 for i in idx])
        positions.append(pos[b][idx])

    if tokens.batched:
        return TokenSet(gather_rows(tokens.tokens, np.asarray(rows)), np.stack(positions), tokens.grid_shape)
    return TokenSet(gather_rows(tokens.tokens, rows[0]), positions[0], tokens.grid_shape)


def flops(cfg: ViTConfig, n_tokens: int) -> FlopReport:
    """
    Exact multiply-add counts: per layer 4nD^2 (Q, K, V, O), n^2 D each for
    scores and apply, 2 n D H each for the MLP in and out projections; plus patch
    embedding of the n-1 patch tokens and the D -> E head.
    """
    if n_tokens < 1:
        raise ValueError("n_tokens counts the class token and must be >= 1")
    n, d, h = n_tokens, cfg.model_dim, cfg.hidden_dim
    return FlopReport(
        n_tokens=n,
        layers=cfg.layers,
        projection=4 * n * d * d,
        attention_score=n * n * d,
        attention_apply=n * n * d,
        mlp=2 * n * d * h * 2,
        patch_embed=(n - 1) * cfg.patch_dim * d,
        head=d * cfg.embed_out,
    )


def flops_table(cfg: ViTConfig, token_counts: Sequence[int]) -> pd.DataFrame:
    """Long-form FLOP table plus each total's ratio to the first count"""
    reports = [flops(cfg, n) for n in token_counts]
    frame = pd.concat([r.to_frame() for r in reports], ignore_index=True)
    base = reports[0].total
    ratios = pd.DataFrame([{"n_tokens": r.n_tokens, "term": "ratio_to_first", "macs": r.total / base}
                           for r in reports])
    return pd.concat([frame, ratios], ignore_index=True)


def stage_token_count(side_px: int, policy: CropPolicy) -> Tuple[int, GridShape, int]:
    """(scaled side, scaled grid, kept tokens) for one aerial image"""
    side, grid = policy.scaled_grid(side_px)
    return side, grid, keep_count(policy.beta, grid[0] * grid[1])
