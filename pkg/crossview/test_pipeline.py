"""
End-to-end tests of the two training stages, attention export and evaluation
on the tiny synthetic dataset.
"""

import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from config import RunConfig
from crossview.checkpoint import load_checkpoint
from crossview.dataset import DatasetModes, SceneSpec, emit_dataset
from crossview.errors import CropBudgetError
from crossview.evaluate import METRIC_NAMES
from crossview.pipeline import (
    ATTN_DIR,
    SWEEP_COLUMNS,
    crop_policy,
    evaluate,
    export_attention,
    load_model,
    majority_holds,
    run_ablation,
    run_crop_sweep,
    stage_flops,
    train_stage1,
    train_stage2,
)
from crossview.run_logger import EPOCH_COLUMNS, RunLogger
from crossview.vit import load_attention


@pytest.fixture
def stage1(tiny_config):
    return tiny_config, train_stage1(tiny_config)


@pytest.fixture
def exported(stage1):
    cfg, ckpt = stage1
    return cfg, ckpt, export_attention(cfg, ckpt)


class TestStageOne:

    def test_writes_a_loadable_checkpoint(self, stage1):
        cfg, ckpt = stage1
        assert ckpt.exists()
        model, stage = load_model(cfg, ckpt)
        assert stage == 1
        assert model.aerial.cfg.grid_shape == (4, 4)
        assert (ckpt.parent / "config_resolved.txt").exists()

    def test_epoch_log(self, stage1):
        cfg, _ = stage1
        frame = RunLogger(cfg.out_dir).load_epochs(1)
        assert list(frame.columns) == EPOCH_COLUMNS
        assert frame["epoch"].tolist() == [0, 1]
        assert frame["steps"].tolist() == [2, 2]
        assert np.isfinite(frame["loss"]).all()
        assert RunLogger(cfg.out_dir).get_statistics()["checkpoints"] == 1

    def test_reruns_are_bit_identical(self, tiny_config, tmp_path):
        first = load_checkpoint(train_stage1(tiny_config))
        second = load_checkpoint(train_stage1(tiny_config.with_overrides(out_dir=str(tmp_path / "again"))))
        assert first.keys() == second.keys()
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])

    def test_plain_adamw_also_trains(self, tiny_config):
        cfg = tiny_config.with_overrides(asam=False, epochs_stage1=1)
        assert train_stage1(cfg).exists()


class TestAttentionExport:

    def test_one_file_per_tile(self, exported):
        cfg, _, paths = exported
        assert len(paths) == 8
        for path in paths:
            attn = load_attention(path)
            assert attn.grid_shape == (4, 4)
            assert attn.values.sum() <= 1.0 + 1e-6
            assert attn.values.min() >= 0.0

    def test_export_is_reproducible(self, exported, tmp_path):
        cfg, ckpt, paths = exported
        again = export_attention(cfg, ckpt, tmp_path / "attn2")
        for a, b in zip(paths, again):
            assert a.name == b.name
            assert a.read_bytes() == b.read_bytes()

    def test_heatmaps(self, stage1, tmp_path):
        cfg, ckpt = stage1
        export_attention(cfg, ckpt, tmp_path / "attn", heatmaps=True)
        assert len(list((tmp_path / "attn" / "heatmaps").glob("*.pgm"))) == 8

    def test_rejects_stage_two_checkpoint(self, exported):
        cfg, ckpt, _ = exported
        stage2 = train_stage2(cfg, ckpt)
        with pytest.raises(ValueError, match="stage-1"):
            export_attention(cfg, stage2)


class TestStageTwo:

    def test_keeps_beta_of_the_tokens(self, exported):
        cfg, ckpt, _ = exported
        path = train_stage2(cfg, ckpt)
        model, stage = load_model(cfg, path)
        assert stage == 2
        assert model.aerial.cfg.image_height == 32
        flops = pd.read_csv(path.parent / "flops_stage2.csv")
        aerial = flops[flops["stream"] == "aerial"].set_index("stage")
        street = flops[flops["stream"] == "street"].set_index("stage")
        # 16 patches at beta 0.64 keep 10, plus the class token
        assert aerial.loc[2, "tokens"] == 11
        assert aerial.loc[2, "macs"] < aerial.loc[1, "macs"]
        assert street.loc[2, "macs"] == street.loc[1, "macs"]

    def test_zoom_grows_the_grid(self, exported):
        cfg, ckpt, _ = exported
        zoomed = cfg.with_overrides(gamma=1.5625)
        path = train_stage2(zoomed, ckpt)
        model, _ = load_model(zoomed, path)
        # round(32 * 1.25) = 40 px, a 5 x 5 grid
        assert model.aerial.cfg.image_height == 40
        assert model.aerial.cfg.grid_shape == (5, 5)
        report = stage_flops(zoomed, crop_policy(zoomed))
        assert report.set_index(["stream", "stage"]).loc[("aerial", 2), "tokens"] == 17

    def test_keep_everything_matches_stage_one(self, tiny_config):
        cfg = tiny_config.with_overrides(beta=1.0, gamma=1.0)
        report = stage_flops(cfg, crop_policy(cfg)).set_index(["stream", "stage"])
        assert report.loc[("aerial", 2), "tokens"] == report.loc[("aerial", 1), "tokens"] == 17
        assert report.loc[("aerial", 2), "macs"] == report.loc[("aerial", 1), "macs"]

    @pytest.mark.parametrize("aerial_size", [32, 64, 128])
    def test_inverse_zoom_keeps_the_token_count(self, tiny_config, aerial_size):
        cfg = tiny_config.with_overrides(aerial_size=aerial_size, beta=0.64, gamma=1 / 0.64)
        report = stage_flops(cfg, crop_policy(cfg)).set_index(["stream", "stage"])
        assert abs(report.loc[("aerial", 2), "tokens"] - report.loc[("aerial", 1), "tokens"]) <= 1

    def test_frozen_street_stream(self, exported):
        cfg, ckpt, _ = exported
        frozen = cfg.with_overrides(freeze_street=True)
        before, _ = load_model(frozen, ckpt)
        after, _ = load_model(frozen, train_stage2(frozen, ckpt))
        for name, array in before.street.state_arrays().items():
            np.testing.assert_array_equal(after.street.state_arrays()[name], array)

    def test_missing_attention(self, stage1):
        cfg, ckpt = stage1
        with pytest.raises(FileNotFoundError, match="attention"):
            train_stage2(cfg, ckpt)

    def test_polar_rejected(self, exported):
        cfg, ckpt, _ = exported
        with pytest.raises(ValueError, match="polar"):
            train_stage2(cfg.with_overrides(polar=True), ckpt)


class TestEvaluate:

    def test_metrics_files(self, stage1):
        cfg, ckpt = stage1
        metrics = evaluate(cfg, ckpt, split="train")
        assert list(metrics) == METRIC_NAMES
        frame = pd.read_csv(f"{cfg.out_dir}/metrics_train.csv")
        assert frame["metric"].tolist() == METRIC_NAMES
        curve = pd.read_csv(f"{cfg.out_dir}/meter_curve_train.csv")
        assert len(curve) == len(cfg.meter_thresholds)
        assert curve["accuracy"].is_monotonic_increasing

    def test_recall_ordering(self, stage1):
        cfg, ckpt = stage1
        m = evaluate(cfg, ckpt, split="train")
        assert 0.0 <= m["R@1"] <= m["R@5"] <= m["R@10"] <= 100.0
        # 8 references: 1% rounds up to the top-1
        assert m["R@1%"] == m["R@1"]
        # aligned queries sit at tile centers, covered by no other tile
        assert m["hit_rate"] == pytest.approx(m["R@1"])

    def test_stage_two_checkpoint(self, exported):
        cfg, ckpt, _ = exported
        metrics = evaluate(cfg, train_stage2(cfg, ckpt), split="train")
        assert set(metrics) == set(METRIC_NAMES)
        assert RunLogger(cfg.out_dir).get_statistics()["evaluations"] == 1

    def test_empty_split(self, stage1):
        cfg, ckpt = stage1
        with pytest.raises(ValueError, match="empty"):
            evaluate(cfg, ckpt, split="test")

    def test_stage_two_needs_attention(self, exported, tmp_path):
        cfg, ckpt, _ = exported
        stage2 = train_stage2(cfg, ckpt)
        with pytest.raises(FileNotFoundError):
            evaluate(cfg, stage2, split="train", attn_dir=tmp_path / "nowhere")


class TestAblation:

    def test_summary_row(self, tiny_config):
        cfg = tiny_config.with_overrides(epochs_stage1=1)
        frame = run_ablation(cfg, "asam", [0])
        runs = frame[frame["seed"] >= 0]
        assert sorted(runs["arm"]) == ["False", "True"]
        summary = frame[frame["seed"] < 0].iloc[0]
        assert summary["arm"] == "True>=False"
        assert summary["train_r1"] in (0.0, 1.0)
        assert majority_holds(frame) == (summary["train_r1"] == 1.0)
        written = pd.read_csv(f"{cfg.out_dir}/ablation_asam.csv")
        assert len(written) == 3

    def test_unknown_factor(self, tiny_config):
        with pytest.raises(ValueError, match="unknown ablation"):
            run_ablation(tiny_config, "depth", [0])


class TestCropSweep:

    def test_arms_at_equal_epochs(self, exported):
        cfg, ckpt, _ = exported
        frame = run_crop_sweep(cfg, ckpt, [(1.0, 1.0), (0.64, 1.0)])
        assert list(frame.columns) == SWEEP_COLUMNS
        assert frame["tokens"].tolist() == [17, 11]
        assert frame["aerial_side"].tolist() == [32, 32]
        assert frame["macs"].iloc[1] < frame["macs"].iloc[0]
        assert frame["train_r1"].between(0.0, 100.0).all()
        written = pd.read_csv(f"{cfg.out_dir}/crop_sweep.csv")
        assert written["tokens"].tolist() == [17, 11]
        for arm in ("beta1_gamma1", "beta0.64_gamma1"):
            arm_dir = Path(cfg.out_dir) / "crop_sweep" / arm
            assert (arm_dir / "stage2.ckpt").exists()
            assert len(RunLogger(arm_dir).load_epochs(2)) == cfg.epochs_stage2

    def test_over_budget_arm_rejected(self, exported):
        cfg, ckpt, _ = exported
        with pytest.raises(CropBudgetError):
            run_crop_sweep(cfg, ckpt, [(0.9, 1.5625)])


@pytest.mark.slow
class TestLongerRuns:

    def test_loss_starts_near_ln2_and_falls(self, tiny_config):
        cfg = tiny_config.with_overrides(epochs_stage1=20)
        train_stage1(cfg)
        frame = RunLogger(cfg.out_dir).load_epochs(1)
        assert frame["first_loss"].iloc[0] == pytest.approx(math.log(2.0), abs=0.15)
        assert frame["loss"].iloc[-1] < frame["first_loss"].iloc[0]

    def test_attend_and_zoom_pipeline(self, tiny_config):
        cfg = tiny_config.with_overrides(epochs_stage1=10, epochs_stage2=5)
        ckpt = train_stage1(cfg)
        attn = export_attention(cfg, ckpt)
        assert attn[0].parent.name == ATTN_DIR
        stage1 = evaluate(cfg, ckpt, split="train")
        stage2 = evaluate(cfg, train_stage2(cfg, ckpt), split="train")
        assert stage1.keys() == stage2.keys()
        frame = RunLogger(cfg.out_dir).load_epochs(2)
        assert len(frame) == 5
        assert frame["steps"].tolist() == [2] * 5


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """128 aligned pairs and the reference toy model, trained through stage 1"""
    data_dir = tmp_path_factory.mktemp("toy_aligned")
    emit_dataset(SceneSpec(seed=11), 128, DatasetModes(street_height=32, street_width=128, aerial_size=64), data_dir)
    cfg = RunConfig(
        seed=0, data_dir=str(data_dir), out_dir=str(tmp_path_factory.mktemp("toy_run")),
        street_height=32, street_width=128, aerial_size=64, patch_size=8,
        model_dim=64, layers=4, heads=4, mlp_ratio=4.0, embed_out=64,
        alpha=10.0, rho=2.5, lr=1e-4, weight_decay=0.03, batch_size=16,
        epochs_stage1=60, epochs_stage2=10, beta=0.64, gamma=1.0,
    )
    ckpt = train_stage1(cfg)
    return cfg, ckpt, evaluate(cfg, ckpt, split="train")


@pytest.mark.slow
class TestToyAcceptance:

    def test_stage_one_fits_the_training_split(self, toy_run):
        _, _, metrics = toy_run
        assert metrics["R@1"] >= 95.0

    def test_cropping_costs_little_recall(self, toy_run):
        cfg, ckpt, stage1 = toy_run
        export_attention(cfg, ckpt)
        stage2 = evaluate(cfg, train_stage2(cfg, ckpt), split="train")
        assert stage2["R@1"] >= stage1["R@1"] - 5.0

    @pytest.mark.parametrize("factor", ["pos_embed", "asam"])
    def test_first_arm_wins_on_most_seeds(self, tiny_config, tiny_offset_dataset, factor):
        cfg = tiny_config.with_overrides(data_dir=str(tiny_offset_dataset), epochs_stage1=20, batch_size=2)
        frame = run_ablation(cfg, factor, [0, 1, 2])
        assert majority_holds(frame)
