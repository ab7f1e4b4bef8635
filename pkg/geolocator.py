#!/usr/bin/env python3
"""
GEOLOCATOR - Cross-View Geo-Localization
========================================
Street panoramas retrieved against aerial tiles with two ViT streams,
attention-guided aerial cropping and sharpness-aware training.

Subcommands: synth-gen, train-stage1, export-attn, train-stage2, eval,
flops, polar, ablate, crop-sweep.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import colorlog
import numpy as np

# Add project root to path so crossview can be imported
sys.path.insert(0, str(Path(__file__).parent))

import config
from crossview.cropper import flops_table
from crossview.dataset import DatasetModes, SceneSpec, emit_dataset, load_ppm, save_ppm
from crossview.geo import polar_transform_at
from crossview.pipeline import (
    ABLATION_ARMS,
    SWEEP_ARMS,
    aerial_vit_config,
    crop_policy,
    evaluate,
    export_attention,
    run_ablation,
    run_crop_sweep,
    street_vit_config,
    train_stage1,
    train_stage2,
)
from crossview.run_logger import RunLogger

LOG_FORMAT = "%(asctime)s | %(name)-12s | %(levelname)-8s | %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

logger = logging.getLogger("Geolocator")


def setup_logging(level: str = "INFO", out_dir: Optional[str] = None):
    """Colored console output plus <out_dir>/run.log when a run directory is known"""
    root = logging.getLogger()
    root.handlers.clear()
    root.setLevel(level.upper())
    console = colorlog.StreamHandler()
    console.setFormatter(colorlog.ColoredFormatter("%(log_color)s" + LOG_FORMAT, datefmt=DATE_FORMAT))
    root.addHandler(console)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(Path(out_dir) / "run.log", encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
        root.addHandler(file_handler)


def _run_config(args) -> config.RunConfig:
    overrides = {
        "data_dir": getattr(args, "data_dir", None),
        "out_dir": getattr(args, "out_dir", None),
        "seed": getattr(args, "seed", None),
        "log_level": getattr(args, "log_level", None),
    }
    for key in ("epochs_stage1", "epochs_stage2", "beta", "gamma", "batch_size"):
        overrides[key] = getattr(args, key, None)
    return config.load_run_config(getattr(args, "config", None), **overrides)


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_synth_gen(args) -> int:
    spec = SceneSpec(seed=args.seed if args.seed is not None else config.SEED,
                     world_side_m=args.world_side, landmarks=args.landmarks)
    modes = DatasetModes(
        offset=args.mode == "offset", unknown_orientation=args.unknown_orientation, fov_deg=args.fov,
        street_height=args.street_height, street_width=args.street_width, aerial_size=args.aerial_size,
        test_fraction=args.test_fraction, split_mode=args.split_mode,
    )
    emit_dataset(spec, args.n, modes, args.out)
    return 0


def cmd_train_stage1(args) -> int:
    cfg = _run_config(args)
    config.display_config(cfg)
    train_stage1(cfg)
    return 0


def cmd_export_attn(args) -> int:
    cfg = _run_config(args)
    export_attention(cfg, args.checkpoint, args.attn_dir, heatmaps=args.heatmaps)
    return 0


def cmd_train_stage2(args) -> int:
    cfg = _run_config(args)
    config.display_config(cfg)
    train_stage2(cfg, args.checkpoint, args.attn_dir)
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    evaluate(cfg, args.checkpoint, args.split, args.attn_dir)
    return 0


def cmd_flops(args) -> int:
    cfg = _run_config(args)
    vit = street_vit_config(cfg) if args.stream == "street" else aerial_vit_config(cfg)
    tokens = args.tokens
    if not tokens:
        tokens = [vit.num_patches + 1]
        if args.stream == "aerial":
            tokens.append(crop_policy(cfg).keep_count(cfg.aerial_size) + 1)
    table = flops_table(vit, tokens)
    out = Path(args.output) if args.output else Path(cfg.out_dir) / "flops.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False)
    totals = table[table["term"] == "total"]
    for n, macs in zip(totals["n_tokens"], totals["macs"]):
        logger.info(f"🧮 {args.stream} stream, {n} tokens: {macs / 1e6:.2f} M MACs")
    return 0


def cmd_polar(args) -> int:
    image = load_ppm(args.input)
    query = None
    if args.query:
        x, y = (float(v) for v in args.query.split(","))
        query = (x, y)
    warped = polar_transform_at(image.astype(np.float64), query, args.height, args.width)
    save_ppm(np.clip(np.round(warped), 0, 255).astype(np.uint8), args.output)
    logger.info(f"🌀 Polar image {args.height}x{args.width} written to {args.output}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    config.display_config(cfg)
    run_ablation(cfg, args.factor, args.seeds)
    return 0


def _sweep_arm(text: str) -> Tuple[float, float]:
    try:
        beta, gamma = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected beta:gamma, got '{text}'")
    return beta, gamma


def cmd_crop_sweep(args) -> int:
    cfg = _run_config(args)
    config.display_config(cfg)
    run_crop_sweep(cfg, args.checkpoint, args.arms, args.attn_dir)
    return 0


# ============================================================================
# ARGUMENTS
# ============================================================================

def _add_run_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--log-level", dest="log_level")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geolocator", description="Cross-view geo-localization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="render a synthetic cross-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["aligned", "offset"], default="aligned")
    p.add_argument("--unknown-orientation", action="store_true")
    p.add_argument("--fov", type=float, default=360.0)
    p.add_argument("--landmarks", type=int, default=600)
    p.add_argument("--world-side", type=float, default=1600.0)
    p.add_argument("--street-height", type=int, default=config.STREET_HEIGHT)
    p.add_argument("--street-width", type=int, default=config.STREET_WIDTH)
    p.add_argument("--aerial-size", type=int, default=config.AERIAL_SIZE)
    p.add_argument("--test-fraction", type=float, default=0.0)
    p.add_argument("--split-mode", choices=["random", "cross_area"], default="random")
    p.add_argument("--log-level", dest="log_level")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train-stage1", help="regular two-stream training")
    _add_run_args(p)
    p.add_argument("--epochs", dest="epochs_stage1", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("export-attn", help="save stage-1 aerial attention maps")
    _add_run_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attn-dir", dest="attn_dir")
    p.add_argument("--heatmaps", action="store_true", help="also write P5 heat maps")
    p.set_defaults(func=cmd_export_attn)

    p = sub.add_parser("train-stage2", help="attend and zoom-in training")
    _add_run_args(p)
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    p.add_argument("--attn-dir", dest="attn_dir")
    p.add_argument("--epochs", dest="epochs_stage2", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("eval", help="retrieval metrics for a split")
    _add_run_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--attn-dir", dest="attn_dir")
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="analytic per-image MAC counts")
    _add_run_args(p)
    p.add_argument("--stream", choices=["street", "aerial"], default="aerial")
    p.add_argument("--tokens", type=int, nargs="*", help="token counts including the class token")
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--output")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("polar", help="polar-transform an aerial image")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--query", help="x,y pixel to center the warp on (default: image center)")
    p.add_argument("--height", type=int, default=config.STREET_HEIGHT)
    p.add_argument("--width", type=int, default=config.STREET_WIDTH)
    p.add_argument("--log-level", dest="log_level")
    p.set_defaults(func=cmd_polar)

    p = sub.add_parser("ablate", help="two-arm stage-1 ablation over seeds")
    _add_run_args(p)
    p.add_argument("--factor", choices=sorted(ABLATION_ARMS), required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", dest="epochs_stage1", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("crop-sweep", help="stage 2 over several (beta, gamma) arms at equal epochs")
    _add_run_args(p)
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    p.add_argument("--attn-dir", dest="attn_dir")
    p.add_argument("--arms", type=_sweep_arm, nargs="+", default=list(SWEEP_ARMS), help="beta:gamma pairs")
    p.add_argument("--epochs", dest="epochs_stage2", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.set_defaults(func=cmd_crop_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = getattr(args, "out_dir", None) or getattr(args, "out", None)
    setup_logging(getattr(args, "log_level", None) or config.LOG_LEVEL, out_dir)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        logger.info("🛑 Interrupted")
        return 1
    except Exception as e:
        message = str(e).splitlines()[0] if str(e) else type(e).__name__
        logger.error(f"❌ {type(e).__name__}: {message}")
        if getattr(args, "out_dir", None):
            RunLogger(args.out_dir).log_failure(f"{args.command}: {type(e).__name__}: {message}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
