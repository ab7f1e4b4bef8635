"""
Two-Stage Training Pipeline
===========================

Stage 1 trains both streams with the exhaustive triplet loss under (A)SAM.
The stage-1 aerial attention is exported once; stage 2 zooms the aerial
input by sqrt(gamma), keeps the beta most attended patches and continues
training from the stage-1 weights. Evaluation embeds every query and
reference with frozen parameters across worker threads.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import RunConfig, write_resolved
from .checkpoint import load_checkpoint, save_checkpoint
from .cropper import CropPolicy, TokenMask, flops, resize_attention, select_tokens
from .dataset import DatasetIndex, load_index, load_ppm, save_ppm, to_model_input
from .evaluate import one_percent_k, rank_references, recall_at_k, write_metrics
from .geo import polar_transform
from .metric import PairBatch, TripletLossConfig, make_batches, triplet_loss
from .optimizer import AdamWState, AsamConfig, AsamOptimizer, CosineSchedule, cosine_lr
from .run_logger import EpochRecord, RunLogger
from .sampling import resize_image
from .tensor import no_grad
from .vit import AttentionMap, PosEmbedKind, TwoStreamModel, ViTConfig, ViTEncoder, load_attention, save_attention

logger = logging.getLogger("Pipeline")

STAGE1_CKPT = "stage1.ckpt"
STAGE2_CKPT = "stage2.ckpt"
ATTN_DIR = "attention"
EMBED_CHUNK = 32
META_STAGE = "meta/stage"
META_AERIAL_SIDE = "meta/aerial_side"
META_AERIAL_GRID = "meta/aerial_grid"


# ============================================================================
# MODEL AND DATA
# ============================================================================

def street_vit_config(cfg: RunConfig) -> ViTConfig:
    return ViTConfig(
        image_height=cfg.street_height, image_width=cfg.street_width, patch_size=cfg.patch_size,
        model_dim=cfg.model_dim, layers=cfg.layers, heads=cfg.heads, mlp_ratio=cfg.mlp_ratio,
        embed_out=cfg.embed_out, pos_embed_kind=PosEmbedKind(cfg.pos_embed),
    )


def aerial_vit_config(cfg: RunConfig) -> ViTConfig:
    """Square aerial tiles, or the street shape when the polar warp is on"""
    street = street_vit_config(cfg)
    if cfg.polar:
        return street
    return ViTConfig(
        image_height=cfg.aerial_size, image_width=cfg.aerial_size, patch_size=street.patch_size,
        model_dim=street.model_dim, layers=street.layers, heads=street.heads, mlp_ratio=street.mlp_ratio,
        embed_out=street.embed_out, pos_embed_kind=street.pos_embed_kind,
    )


def build_model(cfg: RunConfig, dtype=None) -> TwoStreamModel:
    return TwoStreamModel(street_vit_config(cfg), aerial_vit_config(cfg), seed=cfg.seed, dtype=dtype)


def crop_policy(cfg: RunConfig) -> CropPolicy:
    return CropPolicy(beta=cfg.beta, gamma=cfg.gamma, patch_size=cfg.patch_size, budget=cfg.crop_budget)


class SampleStore:
    """Decoded model inputs per sample id, cached"""

    def __init__(self, index: DatasetIndex, cfg: RunConfig):
        self.index = index
        self.polar = cfg.polar
        self.street_shape = (cfg.street_height, cfg.street_width)
        self.aerial_side = cfg.aerial_size
        self._street: Dict[str, np.ndarray] = {}
        self._aerial: Dict[str, np.ndarray] = {}

    def set_aerial_side(self, side: int):
        """Stage-2 zoom: aerial tiles are resampled to side x side"""
        if self.polar:
            raise ValueError("the aerial zoom works on square tiles; disable polar for stage 2")
        if side != self.aerial_side:
            self.aerial_side = side
            self._aerial.clear()

    def street(self, ids: Sequence[str]) -> np.ndarray:
        for sid in ids:
            if sid not in self._street:
                img = to_model_input(load_ppm(self.index.path(self.index.by_id(sid).street)))
                if img.shape[:2] != self.street_shape:
                    raise ValueError(f"street image {sid} is {img.shape[:2]}, config expects {self.street_shape}")
                self._street[sid] = img
        return np.stack([self._street[sid] for sid in ids])

    def aerial(self, ids: Sequence[str]) -> np.ndarray:
        for sid in ids:
            if sid not in self._aerial:
                img = to_model_input(load_ppm(self.index.path(self.index.by_id(sid).aerial)))
                if self.polar:
                    img = polar_transform(img, *self.street_shape)
                elif img.shape[0] != self.aerial_side:
                    img = resize_image(img, self.aerial_side, self.aerial_side)
                self._aerial[sid] = img
        return np.stack([self._aerial[sid] for sid in ids])


@dataclass
class TrainBatch:
    ids: List[str]
    street: np.ndarray
    aerial: np.ndarray
    masks: Optional[List[TokenMask]] = None


def make_loss_fn(loss_cfg: TripletLossConfig):
    def loss_fn(model: TwoStreamModel, batch: TrainBatch):
        street_emb, _ = model.street.embed(batch.street)
        aerial_emb, _ = model.aerial.embed(batch.aerial, keep=batch.masks)
        return triplet_loss(PairBatch(street_emb, aerial_emb, batch.ids), loss_cfg)
    return loss_fn


def embed_images(encoder: ViTEncoder, images: np.ndarray, masks: Optional[Sequence[TokenMask]] = None,
                 workers: int = 1, want_attention: bool = False) -> Tuple[np.ndarray, List[AttentionMap]]:
    """Inference embeddings in chunks, fanned out over worker threads"""
    starts = list(range(0, len(images), EMBED_CHUNK))

    def run(start: int):
        stop = start + EMBED_CHUNK
        keep = list(masks[start:stop]) if masks is not None else None
        with no_grad():
            emb, maps = encoder.embed(images[start:stop], keep=keep, want_attention=want_attention)
        return emb.data.astype(np.float64), maps or []

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    embeddings = np.concatenate([p[0] for p in parts], axis=0)
    maps = [m for p in parts for m in p[1]]
    return embeddings, maps


def _masks(mask_by_id: Optional[Dict[str, TokenMask]], ids: Sequence[str]) -> Optional[List[TokenMask]]:
    return [mask_by_id[i] for i in ids] if mask_by_id is not None else None


def train_recall(model: TwoStreamModel, store: SampleStore, ids: Sequence[str],
                 mask_by_id: Optional[Dict[str, TokenMask]] = None, workers: int = 1) -> float:
    """R@1 of the given samples retrieved among their own tiles"""
    street, _ = embed_images(model.street, store.street(ids), workers=workers)
    aerial, _ = embed_images(model.aerial, store.aerial(ids), _masks(mask_by_id, ids), workers=workers)
    return recall_at_k(rank_references(street, aerial, 1, ids, ids), 1)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_model(path: Union[str, Path], model: TwoStreamModel, stage: int,
               adamw: Optional[AdamWState] = None) -> Path:
    arrays = dict(model.state_arrays())
    if adamw is not None:
        arrays.update(adamw.state_arrays())
    cfg = model.aerial.cfg
    arrays[META_STAGE] = np.array([stage], dtype=np.float32)
    arrays[META_AERIAL_SIDE] = np.array([cfg.image_height], dtype=np.float32)
    arrays[META_AERIAL_GRID] = np.array(cfg.grid_shape, dtype=np.float32)
    save_checkpoint(path, arrays)
    return Path(path)


def load_model(cfg: RunConfig, path: Union[str, Path]) -> Tuple[TwoStreamModel, int]:
    """Rebuild the model for a checkpoint of either stage"""
    arrays = load_checkpoint(path)
    model = build_model(cfg)
    stage = int(arrays[META_STAGE][0]) if META_STAGE in arrays else 1
    if stage == 2:
        side = int(arrays[META_AERIAL_SIDE][0])
        model.aerial.resize_input(side, side)
    model.load_arrays(arrays)
    logger.info(f"📦 Loaded stage-{stage} checkpoint {path}")
    return model, stage


# ============================================================================
# TRAINING
# ============================================================================

def _epoch_seed(seed: int, stage: int, epoch: int) -> int:
    return seed * 1_000_003 + stage * 10_007 + epoch


def _train(model: TwoStreamModel, cfg: RunConfig, index: DatasetIndex, store: SampleStore,
           stage: int, epochs: int, run_logger: RunLogger,
           mask_by_id: Optional[Dict[str, TokenMask]] = None) -> Tuple[AdamWState, List[EpochRecord]]:
    ids = index.ids("train")
    plan = [list(make_batches(index, cfg.batch_size, _epoch_seed(cfg.seed, stage, e), ids)) for e in range(epochs)]
    total_steps = sum(len(p) for p in plan)
    if total_steps == 0:
        raise ValueError(f"no training batches: {len(ids)} train samples, batch size {cfg.batch_size}")
    schedule = CosineSchedule(total_steps, cfg.lr, cfg.lr_min)
    adamw = AdamWState(lr0=cfg.lr, weight_decay=cfg.weight_decay)
    optimizer = AsamOptimizer(adamw, AsamConfig(rho=cfg.rho, eta=cfg.eta), enabled=cfg.asam)
    loss_fn = make_loss_fn(TripletLossConfig(alpha=cfg.alpha))

    logger.info(f"🎓 Stage {stage}: {len(ids)} samples, {epochs} epochs, {total_steps} steps, "
                f"{'ASAM' if cfg.asam else 'AdamW'}")
    records, step = [], 0
    for epoch, batches in enumerate(plan):
        started = time.perf_counter()
        losses = []
        for batch_ids in batches:
            batch = TrainBatch(batch_ids, store.street(batch_ids), store.aerial(batch_ids), _masks(mask_by_id, batch_ids))
            losses.append(optimizer.step(model, batch, loss_fn, cosine_lr(step, schedule)))
            step += 1
        r1 = train_recall(model, store, ids, mask_by_id, cfg.eval_workers)
        record = EpochRecord(
            stage=stage, epoch=epoch, steps=len(batches), loss=float(np.mean(losses)) if losses else float("nan"),
            first_loss=losses[0] if losses else float("nan"), train_r1=r1,
            lr=cosine_lr(step, schedule), seconds=time.perf_counter() - started,
        )
        run_logger.log_epoch(record)
        records.append(record)
        logger.info(f"   epoch {epoch + 1}/{epochs}: loss {record.loss:.4f}, train R@1 {r1:.1f}%, "
                    f"{record.seconds:.1f}s")
    return adamw, records


def _prepare(cfg: RunConfig) -> Tuple[DatasetIndex, RunLogger]:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out_dir)
    return load_index(cfg.data_dir), RunLogger(out_dir)


def train_stage1(cfg: RunConfig) -> Path:
    """Regular two-stream training; writes stage1.ckpt and stage1_log.csv"""
    index, run_logger = _prepare(cfg)
    model = build_model(cfg)
    store = SampleStore(index, cfg)
    adamw, _ = _train(model, cfg, index, store, 1, cfg.epochs_stage1, run_logger)
    path = save_model(Path(cfg.out_dir) / STAGE1_CKPT, model, 1, adamw)
    run_logger.log_checkpoint(path)
    logger.info(f"✅ Stage-1 checkpoint: {path}")
    logger.info(run_logger.generate_report(1))
    return path


def _heatmap(attn: AttentionMap, patch_size: int) -> np.ndarray:
    grid = attn.as_grid()
    peak = grid.max()
    scaled = grid / peak if peak > 0 else grid
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    return np.kron(pixels, np.ones((patch_size, patch_size), dtype=np.uint8))


def export_attention(cfg: RunConfig, checkpoint: Union[str, Path], attn_dir: Optional[Union[str, Path]] = None,
                     heatmaps: bool = False) -> List[Path]:
    """One ATTN file per reference tile from the last-layer class-token row"""
    index = load_index(cfg.data_dir)
    model, stage = load_model(cfg, checkpoint)
    if stage != 1:
        raise ValueError("attention is exported from a stage-1 checkpoint")
    attn_dir = Path(attn_dir or Path(cfg.out_dir) / ATTN_DIR)
    ids = index.ids()
    _, maps = embed_images(model.aerial, SampleStore(index, cfg).aerial(ids), workers=cfg.eval_workers,
                           want_attention=True)
    paths = []
    for sid, attn in zip(ids, maps):
        path = attn_dir / f"{sid}.attn"
        save_attention(path, attn)
        paths.append(path)
        if heatmaps:
            save_ppm(_heatmap(attn, cfg.patch_size), attn_dir / "heatmaps" / f"{sid}.pgm")
    logger.info(f"🔥 Exported {len(paths)} attention maps to {attn_dir}")
    return paths


def load_masks(attn_dir: Union[str, Path], ids: Sequence[str], stage1_grid: Tuple[int, int],
               policy: CropPolicy, new_grid: Tuple[int, int]) -> Dict[str, TokenMask]:
    """resize_attention -> select_tokens for every reference tile"""
    attn_dir = Path(attn_dir)
    masks = {}
    for sid in ids:
        path = attn_dir / f"{sid}.attn"
        if not path.exists():
            raise FileNotFoundError(f"missing attention file {path}; run export-attn first")
        attn = load_attention(path)
        if tuple(attn.grid_shape) != tuple(stage1_grid):
            raise ValueError(f"{path}: grid {attn.grid_shape}, stage-1 aerial grid is {stage1_grid}")
        masks[sid] = select_tokens(resize_attention(attn, new_grid), policy.beta)
    return masks


def stage_flops(cfg: RunConfig, policy: CropPolicy) -> pd.DataFrame:
    """Per-image MACs of each stream in stage 1 and stage 2"""
    street_cfg, aerial_cfg = street_vit_config(cfg), aerial_vit_config(cfg)
    side, grid = policy.scaled_grid(cfg.aerial_size)
    kept = policy.keep_count(cfg.aerial_size)
    rows = [
        ("street", 1, street_cfg.num_patches + 1, flops(street_cfg, street_cfg.num_patches + 1).total),
        ("street", 2, street_cfg.num_patches + 1, flops(street_cfg, street_cfg.num_patches + 1).total),
        ("aerial", 1, aerial_cfg.num_patches + 1, flops(aerial_cfg, aerial_cfg.num_patches + 1).total),
        ("aerial", 2, kept + 1, flops(aerial_cfg, kept + 1).total),
    ]
    return pd.DataFrame(rows, columns=["stream", "stage", "tokens", "macs"])


def train_stage2(cfg: RunConfig, stage1_ckpt: Union[str, Path], attn_dir: Optional[Union[str, Path]] = None) -> Path:
    """Attend and zoom-in: cropped, higher-resolution aerial input, continued training"""
    if cfg.polar:
        raise ValueError("stage 2 crops square aerial grids; disable polar")
    policy = crop_policy(cfg)
    index, run_logger = _prepare(cfg)
    model, stage = load_model(cfg, stage1_ckpt)
    if stage != 1:
        raise ValueError(f"{stage1_ckpt} is not a stage-1 checkpoint")

    stage1_grid = model.aerial.cfg.grid_shape
    side, grid = policy.scaled_grid(cfg.aerial_size)
    attn_dir = Path(attn_dir or Path(cfg.out_dir) / ATTN_DIR)
    mask_by_id = load_masks(attn_dir, index.ids(), stage1_grid, policy, grid)
    model.aerial.resize_input(side, side)
    if cfg.freeze_street:
        model.freeze("street")
        logger.info("🧊 Street stream frozen")

    store = SampleStore(index, cfg)
    store.set_aerial_side(side)
    report = stage_flops(cfg, policy)
    report.to_csv(Path(cfg.out_dir) / "flops_stage2.csv", index=False)
    kept = policy.keep_count(cfg.aerial_size)
    logger.info(f"🔍 Aerial {cfg.aerial_size}px -> {side}px, grid {grid}, keeping {kept} of {grid[0] * grid[1]} patches")

    adamw, _ = _train(model, cfg, index, store, 2, cfg.epochs_stage2, run_logger, mask_by_id)
    path = save_model(Path(cfg.out_dir) / STAGE2_CKPT, model, 2, adamw)
    run_logger.log_checkpoint(path)
    logger.info(f"✅ Stage-2 checkpoint: {path}")
    logger.info(run_logger.generate_report(2))
    return path


# ============================================================================
# EVALUATION
# ============================================================================

def evaluate(cfg: RunConfig, checkpoint: Union[str, Path], split: str = "test",
             attn_dir: Optional[Union[str, Path]] = None) -> Dict[str, float]:
    """Rank every tile for each query of the split; writes metrics CSVs"""
    index = load_index(cfg.data_dir)
    query_ids = index.ids(split)
    if not query_ids:
        raise ValueError(f"split '{split}' is empty")
    ref_ids = index.ids()
    model, stage = load_model(cfg, checkpoint)
    store = SampleStore(index, cfg)

    masks = None
    if stage == 2:
        policy = crop_policy(cfg)
        side, grid = policy.scaled_grid(cfg.aerial_size)
        if side != model.aerial.cfg.image_height:
            raise ValueError(f"checkpoint aerial side {model.aerial.cfg.image_height} vs config {side}")
        attn_dir = Path(attn_dir or Path(cfg.out_dir) / ATTN_DIR)
        masks = load_masks(attn_dir, ref_ids, aerial_vit_config(cfg).grid_shape, policy, grid)
        store.set_aerial_side(side)

    queries, _ = embed_images(model.street, store.street(query_ids), workers=cfg.eval_workers)
    refs, _ = embed_images(model.aerial, store.aerial(ref_ids), _masks(masks, ref_ids), workers=cfg.eval_workers)
    k = max(10, one_percent_k(len(ref_ids)))
    result = rank_references(queries, refs, k, query_ids, ref_ids)

    out_dir = Path(cfg.out_dir)
    write_metrics(out_dir, split, result, index, cfg.meter_thresholds)
    RunLogger(out_dir).log_evaluation(split, dict(result.metrics))
    return dict(result.metrics)


# ============================================================================
# ABLATIONS
# ============================================================================

ABLATION_ARMS = {
    "pos_embed": ("learnable", "fixed_sincos_2d"),
    "asam": (True, False),
    "polar": (False, True),
}


def run_ablation(cfg: RunConfig, factor: str, seeds: Sequence[int]) -> pd.DataFrame:
    """
    Stage-1 runs for both arms of a factor over several seeds. The summary
    row reports on how many seeds the first arm reached at least the second
    arm's training-split R@1.
    """
    if factor not in ABLATION_ARMS:
        raise ValueError(f"unknown ablation factor '{factor}', choose from {sorted(ABLATION_ARMS)}")
    if not seeds:
        raise ValueError("need at least one seed")
    index = load_index(cfg.data_dir)
    base_dir = Path(cfg.out_dir) / f"ablation_{factor}"
    rows = []
    for seed in seeds:
        for arm in ABLATION_ARMS[factor]:
            arm_cfg = cfg.with_overrides(**{factor: arm, "seed": seed,
                                            "out_dir": str(base_dir / f"{arm}_seed{seed}")})
            write_resolved(arm_cfg)
            model = build_model(arm_cfg)
            _, records = _train(model, arm_cfg, index, SampleStore(index, arm_cfg), 1,
                                arm_cfg.epochs_stage1, RunLogger(arm_cfg.out_dir))
            rows.append({"factor": factor, "arm": str(arm), "seed": seed, "train_r1": records[-1].train_r1})
            logger.info(f"🧪 {factor}={arm} seed {seed}: train R@1 {records[-1].train_r1:.1f}%")

    frame = pd.DataFrame(rows)
    first, second = (str(a) for a in ABLATION_ARMS[factor])
    by_seed = frame.pivot(index="seed", columns="arm", values="train_r1")
    wins = int((by_seed[first] >= by_seed[second]).sum())
    majority = wins * 2 > len(seeds)
    summary = pd.DataFrame([{"factor": factor, "arm": f"{first}>={second}", "seed": -1, "train_r1": float(wins)}])
    frame = pd.concat([frame, summary], ignore_index=True)
    frame.to_csv(Path(cfg.out_dir) / f"ablation_{factor}.csv", index=False)
    logger.info(f"{'✅' if majority else '⚠️'} {first} >= {second} on {wins}/{len(seeds)} seeds")
    return frame


def majority_holds(frame: pd.DataFrame) -> bool:
    """Read the summary row written by run_ablation"""
    runs = frame[frame["seed"] >= 0]
    wins = float(frame[frame["seed"] < 0]["train_r1"].iloc[0])
    return wins * 2 > runs["seed"].nunique()


SWEEP_ARMS: Tuple[Tuple[float, float], ...] = ((1.0, 1.0), (0.64, 1.0), (0.64, 1.5625))
SWEEP_COLUMNS = ["beta", "gamma", "aerial_side", "tokens", "macs", "train_r1"]


def run_crop_sweep(cfg: RunConfig, stage1_ckpt: Union[str, Path],
                   arms: Sequence[Tuple[float, float]] = SWEEP_ARMS,
                   attn_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """
    Stage 2 from one stage-1 checkpoint for each (beta, gamma) arm, all at
    the same epoch count. The (1, 1) arm continues training without any
    cropping. Writes crop_sweep.csv with the aerial token count, per-image
    MACs and final training-split R@1 of each arm.
    """
    if not arms:
        raise ValueError("need at least one (beta, gamma) arm")
    attn_dir = Path(attn_dir or Path(cfg.out_dir) / ATTN_DIR)
    base_dir = Path(cfg.out_dir) / "crop_sweep"
    rows = []
    for beta, gamma in arms:
        arm_cfg = cfg.with_overrides(beta=beta, gamma=gamma, out_dir=str(base_dir / f"beta{beta:g}_gamma{gamma:g}"))
        policy = crop_policy(arm_cfg)
        train_stage2(arm_cfg, stage1_ckpt, attn_dir)
        aerial = stage_flops(arm_cfg, policy).set_index(["stream", "stage"]).loc[("aerial", 2)]
        r1 = float(RunLogger(arm_cfg.out_dir).load_epochs(2)["train_r1"].iloc[-1])
        side, _ = policy.scaled_grid(cfg.aerial_size)
        rows.append({"beta": beta, "gamma": gamma, "aerial_side": side, "tokens": int(aerial["tokens"]),
                     "macs": int(aerial["macs"]), "train_r1": r1})
        logger.info(f"🔬 beta {beta:g}, gamma {gamma:g}: {int(aerial['tokens'])} tokens, "
                    f"{aerial['macs'] / 1e6:.2f} M MACs, train R@1 {r1:.1f}%")

    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    frame.to_csv(Path(cfg.out_dir) / "crop_sweep.csv", index=False)
    return frame
