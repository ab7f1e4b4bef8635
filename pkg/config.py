"""
GEOLOCATOR - Configuration

Environment-backed defaults plus the run configuration file:
one `key = value` per line, `#` starts a comment.
"""

import logging
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger("Config")

# ============================================================================
# PATHS
# ============================================================================
DATA_DIR = os.getenv("GEOLOC_DATA_DIR", "data/synth")
OUT_DIR = os.getenv("GEOLOC_OUT_DIR", "runs/default")
SEED = int(os.getenv("GEOLOC_SEED", "0"))

# ============================================================================
# IMAGE SIZES
# ============================================================================
STREET_HEIGHT = int(os.getenv("STREET_HEIGHT", "64"))
STREET_WIDTH = int(os.getenv("STREET_WIDTH", "256"))
AERIAL_SIZE = int(os.getenv("AERIAL_SIZE", "128"))

# ============================================================================
# ENCODER (both streams)
# ============================================================================
PATCH_SIZE = int(os.getenv("PATCH_SIZE", "8"))
MODEL_DIM = int(os.getenv("MODEL_DIM", "64"))
LAYERS = int(os.getenv("LAYERS", "4"))
HEADS = int(os.getenv("HEADS", "4"))
MLP_RATIO = float(os.getenv("MLP_RATIO", "4.0"))
EMBED_OUT = int(os.getenv("EMBED_OUT", "64"))
POS_EMBED = os.getenv("POS_EMBED", "learnable")  # learnable | fixed_sincos_2d

# ============================================================================
# LOSS AND OPTIMIZER
# ============================================================================
ALPHA = float(os.getenv("ALPHA", "10"))
LR = float(os.getenv("LR", "1e-4"))
LR_MIN = float(os.getenv("LR_MIN", "0"))
WEIGHT_DECAY = float(os.getenv("WEIGHT_DECAY", "0.03"))
RHO = float(os.getenv("RHO", "2.5"))
ETA = float(os.getenv("ETA", "0.01"))
ASAM = os.getenv("ASAM", "true").lower() == "true"
BATCH_SIZE = int(os.getenv("BATCH_SIZE", "16"))
EPOCHS_STAGE1 = int(os.getenv("EPOCHS_STAGE1", "100"))
EPOCHS_STAGE2 = int(os.getenv("EPOCHS_STAGE2", "100"))

# ============================================================================
# ATTEND AND ZOOM-IN
# ============================================================================
BETA = float(os.getenv("BETA", "0.64"))
GAMMA = float(os.getenv("GAMMA", "1.0"))
CROP_BUDGET = float(os.getenv("CROP_BUDGET", "1.000001"))
FREEZE_STREET = os.getenv("FREEZE_STREET", "false").lower() == "true"
POLAR = os.getenv("POLAR", "false").lower() == "true"

# ============================================================================
# EVALUATION
# ============================================================================
EVAL_WORKERS = int(os.getenv("EVAL_WORKERS", "4"))
METER_THRESHOLDS = os.getenv("METER_THRESHOLDS", "1,5,10,25,50,100,250,500,1000")

# ============================================================================
# LOGGING
# ============================================================================
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

_TRUE = {"true", "1", "yes"}
_FALSE = {"false", "0", "no"}
POS_EMBED_KINDS = ("learnable", "fixed_sincos_2d")


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings of one run; every field has a default"""
    seed: int = SEED
    data_dir: str = DATA_DIR
    out_dir: str = OUT_DIR
    street_height: int = STREET_HEIGHT
    street_width: int = STREET_WIDTH
    aerial_size: int = AERIAL_SIZE
    patch_size: int = PATCH_SIZE
    model_dim: int = MODEL_DIM
    layers: int = LAYERS
    heads: int = HEADS
    mlp_ratio: float = MLP_RATIO
    embed_out: int = EMBED_OUT
    pos_embed: str = POS_EMBED
    alpha: float = ALPHA
    lr: float = LR
    lr_min: float = LR_MIN
    weight_decay: float = WEIGHT_DECAY
    rho: float = RHO
    eta: float = ETA
    asam: bool = ASAM
    batch_size: int = BATCH_SIZE
    epochs_stage1: int = EPOCHS_STAGE1
    epochs_stage2: int = EPOCHS_STAGE2
    beta: float = BETA
    gamma: float = GAMMA
    crop_budget: float = CROP_BUDGET
    freeze_street: bool = FREEZE_STREET
    polar: bool = POLAR
    eval_workers: int = EVAL_WORKERS
    meter_thresholds: Tuple[float, ...] = _floats(METER_THRESHOLDS)
    log_level: str = LOG_LEVEL

    def with_overrides(self, **overrides) -> "RunConfig":
        return replace(self, **{k: _coerce(k, v) for k, v in overrides.items()})


_FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _coerce(key: str, value):
    """Convert a raw value (usually text) to the type of the field's default"""
    if key not in _FIELD_TYPES:
        raise KeyError(f"unknown config key '{key}'")
    kind = _FIELD_TYPES[key]
    if not isinstance(value, str):
        if kind is tuple:
            return tuple(float(v) for v in value)
        return kind(value)
    text = value.strip()
    if kind is bool:
        lowered = text.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got '{value}'")
    if kind is tuple:
        return _floats(text)
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def parse_config_text(text: str) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValueError(f"line {lineno}: unknown config key '{key}'")
        try:
            values[key] = _coerce(key, value)
        except ValueError as e:
            raise ValueError(f"line {lineno}: {e}") from e
    return values


def load_run_config(path: Optional[Union[str, Path]] = None, **overrides) -> RunConfig:
    """Defaults, then the config file, then keyword overrides; validated"""
    values: Dict[str, object] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update({k: _coerce(k, v) for k, v in overrides.items() if v is not None})
    cfg = replace(RunConfig(), **values)
    validate_config(cfg)
    return cfg


# ============================================================================
# VALIDATION
# ============================================================================
def validate_config(cfg: RunConfig):
    """Validate configuration parameters"""
    errors = []

    for name in ("street_height", "street_width", "aerial_size"):
        size = getattr(cfg, name)
        if size < 1 or size % cfg.patch_size:
            errors.append(f"{name}={size} must be a positive multiple of patch_size={cfg.patch_size}")

    if cfg.model_dim < 1 or cfg.heads < 1 or cfg.model_dim % cfg.heads:
        errors.append(f"model_dim={cfg.model_dim} must be divisible by heads={cfg.heads}")

    if cfg.layers < 1:
        errors.append("layers must be >= 1")

    if cfg.pos_embed not in POS_EMBED_KINDS:
        errors.append(f"pos_embed must be one of {POS_EMBED_KINDS}")

    if cfg.alpha <= 0:
        errors.append("alpha must be positive")

    if cfg.lr <= 0 or not 0 <= cfg.lr_min <= cfg.lr:
        errors.append("need lr > 0 and 0 <= lr_min <= lr")

    if cfg.weight_decay < 0:
        errors.append("weight_decay must be nonnegative")

    if cfg.rho <= 0 or cfg.eta < 0:
        errors.append("need rho > 0 and eta >= 0")

    if cfg.batch_size < 2:
        errors.append("batch_size must be >= 2 (the triplet loss needs negatives)")

    if cfg.epochs_stage1 < 1 or cfg.epochs_stage2 < 1:
        errors.append("epoch counts must be >= 1")

    if not 0 < cfg.beta <= 1:
        errors.append("beta must be in (0, 1]")

    if cfg.gamma < 1:
        errors.append("gamma must be >= 1")

    if cfg.beta * cfg.gamma > cfg.crop_budget:
        errors.append(f"beta*gamma = {cfg.beta * cfg.gamma:.4f} exceeds crop_budget = {cfg.crop_budget}")

    if cfg.eval_workers < 1:
        errors.append("eval_workers must be >= 1")

    if any(b < a for a, b in zip(cfg.meter_thresholds, cfg.meter_thresholds[1:])):
        errors.append("meter_thresholds must be ascending")

    if errors:
        raise ValueError("Configuration errors:\n" + "\n".join(f"- {e}" for e in errors))

    return True


# ============================================================================
# DISPLAY CONFIGURATION
# ============================================================================
def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(f"{v:g}" for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> Path:
    """Echo the resolved config next to the run's outputs"""
    out_dir = Path(out_dir or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config_resolved.txt"
    path.write_text(format_config(cfg))
    return path


def display_config(cfg: RunConfig):
    """Log the current configuration"""
    logger.info("=" * 60)
    logger.info("🛰️  GEOLOCATOR CONFIGURATION")
    logger.info("=" * 60)
    for line in format_config(cfg).splitlines():
        logger.info(f"  {line}")
    logger.info("=" * 60)


if __name__ == "__main__":
    run_cfg = load_run_config()
    display_config(run_cfg)
