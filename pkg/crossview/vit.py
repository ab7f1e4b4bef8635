"""
Vision Transformer Encoder
==========================

Two-stream ViT encoders for street and aerial images: patchify, embed,
add position rows, run pre-norm encoder blocks, read out the class token
as an l2-normalized embedding and, on request, the last layer's class-token
attention over patches.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import FormatError, ShapeError
from .sampling import resize_grid
from .tensor import (
    Tensor,
    concat,
    gather_rows,
    gelu,
    get_default_dtype,
    l2_normalize,
    layer_norm,
    parameter,
    select,
    softmax,
)

logger = logging.getLogger("ViT")

GridShape = Tuple[int, int]
INIT_STD = 0.02


class PosEmbedKind(Enum):
    """Position embedding variants"""
    LEARNABLE = "learnable"
    FIXED_SINCOS_2D = "fixed_sincos_2d"


@dataclass(frozen=True)
class ViTConfig:
    """Encoder hyperparameters for one stream"""
    image_height: int
    image_width: int
    patch_size: int = 8
    model_dim: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    embed_out: int = 64
    pos_embed_kind: PosEmbedKind = PosEmbedKind.LEARNABLE
    channels: int = 3

    def __post_init__(self):
        errors = []
        if self.patch_size < 1:
            errors.append("patch_size must be positive")
        elif self.image_height % self.patch_size or self.image_width % self.patch_size:
            errors.append(
                f"patch_size {self.patch_size} must divide image {self.image_height}x{self.image_width}"
            )
        if self.heads < 1 or self.model_dim % self.heads:
            errors.append(f"model_dim {self.model_dim} must be divisible by heads {self.heads}")
        if self.embed_out < 1:
            errors.append("embed_out must be >= 1")
        if self.layers < 1:
            errors.append("layers must be >= 1")
        if self.pos_embed_kind == PosEmbedKind.FIXED_SINCOS_2D and self.model_dim % 4:
            errors.append("fixed_sincos_2d needs model_dim divisible by 4")
        if errors:
            raise ValueError("ViT configuration errors:\n" + "\n".join(f"- {e}" for e in errors))

    @property
    def grid_shape(self) -> GridShape:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid_shape
        return rows * cols

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.model_dim))

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class TokenSet:
    """
    Class token plus patch tokens with explicit grid positions.

    tokens is (n+1, D) for one image or (B, n+1, D) for a batch; row 0 is the
    class token. grid_positions is (n, 2) or (B, n, 2) of (row, col).
    """
    tokens: Tensor
    grid_positions: np.ndarray
    grid_shape: GridShape

    def __post_init__(self):
        self.grid_positions = np.asarray(self.grid_positions, dtype=np.int64)
        rows, cols = self.grid_shape
        pos = self.grid_positions
        if pos.shape[-1:] != (2,) or pos.shape[-2] != self.tokens.shape[-2] - 1:
            raise ShapeError(
                f"{pos.shape[-2] if pos.ndim >= 2 else 0} positions for {self.tokens.shape[-2] - 1} patch tokens"
            )
        if pos.size and (pos[..., 0].min() < 0 or pos[..., 0].max() >= rows
                         or pos[..., 1].min() < 0 or pos[..., 1].max() >= cols):
            raise ValueError(f"grid position outside grid {self.grid_shape}")
        flat = self.flat_indices().reshape(-1, pos.shape[-2])
        for row in flat:
            if len(np.unique(row)) != len(row):
                raise ValueError("duplicate grid positions in TokenSet")

    @property
    def batched(self) -> bool:
        return self.tokens.ndim == 3

    @property
    def n_patches(self) -> int:
        return self.tokens.shape[-2] - 1

    def flat_indices(self) -> np.ndarray:
        """Row-major patch index of every patch token"""
        return self.grid_positions[..., 0] * self.grid_shape[1] + self.grid_positions[..., 1]


@dataclass
class PositionEmbedding:
    """(N_full+1) x D table, row 0 for the class token"""
    table: Tensor
    kind: PosEmbedKind
    grid_shape: GridShape


@dataclass
class AttentionMap:
    """Head-averaged class-token attention over the patches of one image"""
    grid_shape: GridShape
    values: np.ndarray
    class_weight: float = 0.0

    def __post_init__(self):
        rows, cols = self.grid_shape
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != rows * cols:
            raise ShapeError(f"{self.values.size} attention values for grid {self.grid_shape}")
        if np.any(self.values < 0):
            raise ValueError("attention values must be nonnegative")

    def as_grid(self) -> np.ndarray:
        return self.values.reshape(self.grid_shape)


# ============================================================================
# PATCHES AND POSITIONS
# ============================================================================

def patchify(image: np.ndarray, patch_size: int) -> Tuple[Tensor, GridShape]:
    """
    Split an H x W x C image into row-major P x P patches, each flattened in
    (row, col, channel) order.
    """
    h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    patches = image.reshape(rows, p, cols, p, c).transpose(0, 2, 1, 3, 4).reshape(rows * cols, p * p * c)
    return Tensor(patches), (rows, cols)


def full_grid_positions(grid_shape: GridShape) -> np.ndarray:
    rows, cols = grid_shape
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1)


def sincos_2d_table(grid_shape: GridShape, dim: int) -> np.ndarray:
    """
    Fixed 2D sinusoid table with a zero class row. The first half of each
    row encodes the grid row, the second half the grid column; each half is
    [sin(p * w_i), cos(p * w_i)] with w_i = 10000^(-i / (dim/4)).
    """
    if dim % 4:
        raise ValueError("sincos table needs dim divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter)
    pos = full_grid_positions(grid_shape).astype(np.float64)

    def encode(p):
        angles = np.outer(p, omega)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    patch_rows = np.concatenate([encode(pos[:, 0]), encode(pos[:, 1])], axis=1)
    return np.concatenate([np.zeros((1, dim)), patch_rows], axis=0)


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling"""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def make_position_embedding(grid_shape: GridShape, dim: int, kind: PosEmbedKind,
                            rng: Optional[np.random.Generator] = None, dtype=None) -> PositionEmbedding:
    rows, cols = grid_shape
    if kind == PosEmbedKind.LEARNABLE:
        rng = rng or np.random.default_rng(0)
        table = parameter(trunc_normal(rng, (rows * cols + 1, dim)), dtype=dtype)
    else:
        table = Tensor(sincos_2d_table(grid_shape, dim), dtype=dtype)
    return PositionEmbedding(table=table, kind=kind, grid_shape=grid_shape)


def add_position(tokens: TokenSet, pe: PositionEmbedding) -> TokenSet:
    """Each token receives the table row of its own grid position"""
    if tuple(tokens.grid_shape) != tuple(pe.grid_shape):
        raise ValueError(
            f"position table grid {pe.grid_shape} does not address token grid {tokens.grid_shape}; "
            "interpolate the embedding first"
        )
    flat = tokens.flat_indices()
    class_col = np.zeros(flat.shape[:-1] + (1,), dtype=np.int64)
    rows = np.concatenate([class_col, flat + 1], axis=-1)
    positioned = tokens.tokens + gather_rows(pe.table, rows)
    return TokenSet(positioned, tokens.grid_positions, tokens.grid_shape)


def interpolate_pos_embed(pe: PositionEmbedding, old_grid: GridShape, new_grid: GridShape) -> PositionEmbedding:
    """Bilinear resample of the patch rows as a 2D field; class row kept"""
    if pe.kind != PosEmbedKind.LEARNABLE:
        raise ValueError("only learnable position embeddings are interpolated")
    if min(old_grid) < 1 or min(new_grid) < 1:
        raise ValueError(f"degenerate grid {old_grid} -> {new_grid}")
    table = pe.table.data
    if table.shape[0] != old_grid[0] * old_grid[1] + 1:
        raise ShapeError(f"table has {table.shape[0]} rows, grid {old_grid} needs {old_grid[0] * old_grid[1] + 1}")
    if tuple(old_grid) == tuple(new_grid):
        return PositionEmbedding(parameter(table.copy(), dtype=table.dtype), pe.kind, tuple(new_grid))

    dim = table.shape[1]
    field_ = table[1:].reshape(old_grid[0], old_grid[1], dim)
    resized = resize_grid(field_, new_grid).reshape(-1, dim)
    new_table = np.concatenate([table[:1], resized], axis=0)
    return PositionEmbedding(parameter(new_table, dtype=table.dtype), pe.kind, tuple(new_grid))


# ============================================================================
# ATTENTION MAP FILES
# ============================================================================

def save_attention(path: Union[str, Path], attn: AttentionMap):
    rows, cols = attn.grid_shape
    grid = attn.as_grid()
    lines = [f"ATTN {rows} {cols}"]
    lines.extend(" ".join(f"{v:.9g}" for v in row) for row in grid)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_attention(path: Union[str, Path]) -> AttentionMap:
    with open(path, "r") as f:
        header = f.readline().split()
        body = f.read().split()
    if len(header) != 3 or header[0] != "ATTN":
        raise FormatError(f"{path}: expected 'ATTN <rows> <cols>' header")
    rows, cols = int(header[1]), int(header[2])
    if len(body) != rows * cols:
        raise FormatError(f"{path}: {len(body)} values for a {rows}x{cols} grid")
    values = np.array([float(v) for v in body])
    return AttentionMap((rows, cols), values, class_weight=max(0.0, 1.0 - float(values.sum())))


# ============================================================================
# ENCODER
# ============================================================================

class ViTEncoder:
    """One stream: patch embedding, L pre-norm blocks, linear head"""

    def __init__(self, cfg: ViTConfig, rng: Optional[np.random.Generator] = None,
                 name: str = "encoder", dtype=None):
        self.cfg = cfg
        self.name = name
        self.dtype = dtype or get_default_dtype()
        rng = rng or np.random.default_rng(0)
        d, hdim, e = cfg.model_dim, cfg.hidden_dim, cfg.embed_out

        def weight(*shape):
            return parameter(trunc_normal(rng, shape), dtype=self.dtype)

        def zeros(*shape):
            return parameter(np.zeros(shape), dtype=self.dtype)

        def ones(*shape):
            return parameter(np.ones(shape), dtype=self.dtype)

        self.params: Dict[str, Tensor] = {
            "patch_w": weight(cfg.patch_dim, d),
            "patch_b": zeros(d),
            "cls": weight(1, d),
        }
        for i in range(cfg.layers):
            block = {
                "ln1_g": ones(d), "ln1_b": zeros(d),
                "wq": weight(d, d), "bq": zeros(d),
                "wk": weight(d, d), "bk": zeros(d),
                "wv": weight(d, d), "bv": zeros(d),
                "wo": weight(d, d), "bo": zeros(d),
                "ln2_g": ones(d), "ln2_b": zeros(d),
                "w1": weight(d, hdim), "b1": zeros(hdim),
                "w2": weight(hdim, d), "b2": zeros(d),
            }
            self.params.update({f"blocks.{i}.{k}": v for k, v in block.items()})
        self.params.update({
            "ln_f_g": ones(d), "ln_f_b": zeros(d),
            "head_w": weight(d, e), "head_b": zeros(e),
        })
        self.pos_embed = make_position_embedding(cfg.grid_shape, d, cfg.pos_embed_kind, rng, dtype=self.dtype)

    def parameters(self) -> Dict[str, Tensor]:
        """Trainable tensors in a fixed order"""
        params = dict(self.params)
        if self.pos_embed.kind == PosEmbedKind.LEARNABLE:
            params["pos_embed"] = self.pos_embed.table
        return params

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        for key, tensor in self.parameters().items():
            if key not in arrays:
                raise KeyError(f"{self.name}: checkpoint is missing '{key}'")
            if arrays[key].shape != tensor.shape:
                raise ShapeError(f"{self.name}/{key}: checkpoint {arrays[key].shape} vs model {tensor.shape}")
            tensor.data = np.array(arrays[key], dtype=self.dtype)

    def resize_input(self, image_height: int, image_width: int):
        """Switch to a new input size, carrying the position table over"""
        old_grid = self.cfg.grid_shape
        self.cfg = replace(self.cfg, image_height=image_height, image_width=image_width)
        new_grid = self.cfg.grid_shape
        if self.pos_embed.kind == PosEmbedKind.LEARNABLE:
            self.pos_embed = interpolate_pos_embed(self.pos_embed, old_grid, new_grid)
        else:
            self.pos_embed = make_position_embedding(new_grid, self.cfg.model_dim, self.pos_embed.kind, dtype=self.dtype)
        logger.info(f"📐 {self.name}: grid {old_grid} -> {new_grid}")

    def tokenize(self, images: np.ndarray) -> TokenSet:
        """Patch embeddings plus class token, full grid, no positions yet"""
        single = images.ndim == 3
        batch = images[None] if single else images
        patches = np.stack([patchify(img, self.cfg.patch_size)[0].data for img in batch])
        x = Tensor(patches, dtype=self.dtype) @ self.params["patch_w"] + self.params["patch_b"]
        b = x.shape[0]
        cls = self.params["cls"].reshape(1, 1, self.cfg.model_dim) + Tensor(np.zeros((b, 1, self.cfg.model_dim)), dtype=self.dtype)
        tokens = concat([cls, x], axis=1)
        positions = np.broadcast_to(full_grid_positions(self.cfg.grid_shape), (b, self.cfg.num_patches, 2))
        if single:
            return TokenSet(select(tokens, 0, axis=0), positions[0], self.cfg.grid_shape)
        return TokenSet(tokens, positions, self.cfg.grid_shape)

    def _attention(self, x: Tensor, prefix: str) -> Tuple[Tensor, Tensor]:
        p = self.params
        b, n, d = x.shape
        k, dh = self.cfg.heads, self.cfg.head_dim

        def heads(w, bias):
            return (x @ p[prefix + w] + p[prefix + bias]).reshape(b, n, k, dh).transpose(0, 2, 1, 3)

        q, kk, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
        scores = (q @ kk.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        attn = softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return out @ p[prefix + "wo"] + p[prefix + "bo"], attn

    def forward(self, tokens: TokenSet, want_attention: bool = False):
        """
        Run the encoder on position-encoded tokens.

        Returns (embedding, attention) where embedding is (E,) or (B, E) and
        attention is an AttentionMap (or a list for a batch) when requested.
        """
        p = self.params
        x = tokens.tokens
        if not tokens.batched:
            x = x.reshape(1, *x.shape)
        if x.shape[-1] != self.cfg.model_dim:
            raise ShapeError(f"token dim {x.shape[-1]} vs model_dim {self.cfg.model_dim}")

        attn = None
        for i in range(self.cfg.layers):
            prefix = f"blocks.{i}."
            h = layer_norm(x, p[prefix + "ln1_g"], p[prefix + "ln1_b"])
            a, attn = self._attention(h, prefix)
            x = x + a
            h = layer_norm(x, p[prefix + "ln2_g"], p[prefix + "ln2_b"])
            h = gelu(h @ p[prefix + "w1"] + p[prefix + "b1"]) @ p[prefix + "w2"] + p[prefix + "b2"]
            x = x + h

        cls = layer_norm(select(x, 0, axis=1), p["ln_f_g"], p["ln_f_b"])
        emb = l2_normalize(cls @ p["head_w"] + p["head_b"])

        maps = None
        if want_attention:
            maps = self._attention_maps(attn.data, tokens)
        if not tokens.batched:
            emb = select(emb, 0, axis=0)
            maps = maps[0] if maps is not None else None
        return emb, maps

    def _attention_maps(self, attn: np.ndarray, tokens: TokenSet) -> List[AttentionMap]:
        cls_row = attn[:, :, 0, :].astype(np.float64).mean(axis=1)
        flat = tokens.flat_indices().reshape(cls_row.shape[0], -1)
        rows, cols = tokens.grid_shape
        maps = []
        for b in range(cls_row.shape[0]):
            values = np.zeros(rows * cols)
            values[flat[b]] = cls_row[b, 1:]
            maps.append(AttentionMap(tokens.grid_shape, values, class_weight=float(cls_row[b, 0])))
        return maps

    def embed(self, images: np.ndarray, keep: Optional[Sequence] = None, want_attention: bool = False):
        """tokenize -> optional crop -> add_position -> forward"""
        from .cropper import crop_tokens

        tokens = self.tokenize(images)
        if keep is not None:
            tokens = crop_tokens(tokens, keep)
        return self.forward(add_position(tokens, self.pos_embed), want_attention)


class TwoStreamModel:
    """Street and aerial encoders with no shared parameters"""

    def __init__(self, street_cfg: ViTConfig, aerial_cfg: ViTConfig, seed: int = 0, dtype=None):
        rng = np.random.default_rng(seed)
        self.street = ViTEncoder(street_cfg, rng, name="street", dtype=dtype)
        self.aerial = ViTEncoder(aerial_cfg, rng, name="aerial", dtype=dtype)
        self.frozen: set = set()

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for stream in (self.street, self.aerial):
            if stream.name in self.frozen:
                continue
            params.update({f"{stream.name}/{k}": v for k, v in stream.parameters().items()})
        return params

    def freeze(self, stream_name: str):
        self.frozen.add(stream_name)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for stream in (self.street, self.aerial):
            arrays.update({f"{stream.name}/{k}": v for k, v in stream.state_arrays().items()})
        return arrays

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        for stream in (self.street, self.aerial):
            prefix = stream.name + "/"
            stream.load_arrays({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
