"""
crossview - two-stream ViT cross-view geo-localization on a numpy autodiff core
"""

from .cropper import CropPolicy, TokenMask, crop_tokens, flops, resize_attention, scaled_grid, select_tokens
from .errors import BatchInfeasibleError, CropBudgetError, FormatError, NonFiniteError, ShapeError, TapeError
from .geo import AerialTile, GeoLocation, covers, geodesic_m, polar_transform, polar_transform_at
from .metric import PairBatch, TripletLossConfig, make_batches, triplet_loss
from .optimizer import AdamWState, AsamConfig, AsamOptimizer, CosineSchedule, asam_step, cosine_lr
from .tensor import Tensor, backward, gradcheck, no_grad, precision
from .vit import PosEmbedKind, TwoStreamModel, ViTConfig, ViTEncoder

__version__ = "0.1.0"

__all__ = [
    "AdamWState", "AerialTile", "AsamConfig", "AsamOptimizer", "BatchInfeasibleError", "CosineSchedule",
    "CropBudgetError", "CropPolicy", "FormatError", "GeoLocation", "NonFiniteError", "PairBatch",
    "PosEmbedKind", "ShapeError", "TapeError", "Tensor", "TokenMask", "TripletLossConfig", "TwoStreamModel",
    "ViTConfig", "ViTEncoder", "asam_step", "backward", "covers", "cosine_lr", "crop_tokens", "flops",
    "geodesic_m", "gradcheck", "make_batches", "no_grad", "polar_transform", "polar_transform_at",
    "precision", "resize_attention", "scaled_grid", "select_tokens", "triplet_loss",
]
