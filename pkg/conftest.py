import hypothesis
import pytest

from config import RunConfig
from crossview.dataset import DatasetModes, SceneSpec, emit_dataset

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile("fast")

TINY_SCENE = SceneSpec(seed=3, world_side_m=400.0, landmarks=120, radius_range_m=(4.0, 10.0))
TINY_MODES = DatasetModes(street_height=16, street_width=64, aerial_size=32)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Eight aligned samples with small images"""
    out = tmp_path_factory.mktemp("tiny_aligned")
    emit_dataset(TINY_SCENE, 8, TINY_MODES, out)
    return out


@pytest.fixture(scope="session")
def tiny_offset_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_offset")
    emit_dataset(TINY_SCENE, 16, DatasetModes(offset=True, street_height=16, street_width=64, aerial_size=32), out)
    return out


@pytest.fixture
def tiny_config(tiny_dataset, tmp_path):
    """A model small enough to train in seconds"""
    return RunConfig(
        seed=0, data_dir=str(tiny_dataset), out_dir=str(tmp_path / "run"),
        street_height=16, street_width=64, aerial_size=32, patch_size=8,
        model_dim=16, layers=1, heads=2, mlp_ratio=2.0, embed_out=8,
        lr=1e-3, batch_size=4, epochs_stage1=2, epochs_stage2=1, eval_workers=2,
    )
