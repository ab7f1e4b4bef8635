"""
Tests for run configuration parsing and validation.
"""

import pytest

from config import (
    RunConfig,
    format_config,
    load_run_config,
    parse_config_text,
    validate_config,
    write_resolved,
)


def test_defaults_are_valid():
    assert validate_config(RunConfig())


def test_parse_types_and_comments():
    values = parse_config_text(
        "# tiny run\n"
        "layers = 2\n"
        "lr = 3e-4   # smaller\n"
        "asam = no\n"
        "pos_embed = fixed_sincos_2d\n"
        "meter_thresholds = 5, 50\n"
        "\n"
    )
    assert values == {"layers": 2, "lr": 3e-4, "asam": False, "pos_embed": "fixed_sincos_2d",
                      "meter_thresholds": (5.0, 50.0)}


@pytest.mark.parametrize("text,message", [
    ("layers = 2\nwidth = 3\n", "line 2: unknown config key 'width'"),
    ("layers 2\n", "line 1: expected 'key = value'"),
    ("asam = maybe\n", "line 1: asam: expected a boolean"),
    ("\n\nlayers = two\n", "line 3"),
])
def test_parse_errors_name_the_line(text, message):
    with pytest.raises(ValueError, match=message):
        parse_config_text(text)


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 5\nbeta = 0.5\nbatch_size = 8\n")
    cfg = load_run_config(path, batch_size="4", gamma=None)
    assert (cfg.seed, cfg.beta, cfg.batch_size) == (5, 0.5, 4)
    assert cfg.gamma == RunConfig().gamma


@pytest.mark.parametrize("overrides,message", [
    ({"aerial_size": 100}, "aerial_size=100"),
    ({"heads": 3}, "divisible by heads"),
    ({"beta": 0.9, "gamma": 1.56}, "exceeds crop_budget"),
    ({"gamma": 0.5}, "gamma must be >= 1"),
    ({"batch_size": 1}, "batch_size"),
    ({"meter_thresholds": "10,5"}, "ascending"),
    ({"pos_embed": "rotary"}, "pos_embed"),
])
def test_validation(overrides, message):
    with pytest.raises(ValueError, match=message):
        load_run_config(**overrides)


def test_budget_allows_equal_area():
    cfg = load_run_config(beta=0.64, gamma=1.5625)
    assert cfg.beta * cfg.gamma == pytest.approx(1.0)


def test_unknown_override():
    with pytest.raises(KeyError):
        RunConfig().with_overrides(depth=3)


def test_resolved_file_parses_back(tmp_path):
    cfg = RunConfig().with_overrides(asam=False, meter_thresholds=(1, 10), out_dir=str(tmp_path))
    path = write_resolved(cfg)
    assert path == tmp_path / "config_resolved.txt"
    assert "asam = false" in path.read_text()
    assert "meter_thresholds = 1,10" in format_config(cfg)
    assert load_run_config(path) == cfg
