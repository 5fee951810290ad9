from __future__ import annotations

from pathlib import Path

import pytest

from core.config import (
    PipelineConfig,
    config_digest,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
    validate_config,
    validate_paths,
)
from core.types import AbsorptionModel, FoaConvention


def test_defaults_follow_the_recipe() -> None:
    cfg = PipelineConfig()
    assert cfg.sample_rate == 24000
    assert (cfg.stft.frame_ms, cfg.stft.hop_ms) == (20.0, 10.0)
    assert cfg.rooms.rt60_range == (0.1, 0.5)
    assert (cfg.elimination.alpha, cfg.elimination.beta) == (0.3, 0.4)
    assert (cfg.elimination.f_min, cfg.elimination.f_max) == (100.0, 4000.0)
    assert cfg.encoding.convention == FoaConvention.SN3D_ACN
    assert cfg.enhancement.iters == 10


def test_json_round_trip(tmp_path: Path) -> None:
    cfg = PipelineConfig(master_seed=42)
    cfg.rooms.absorption_model = AbsorptionModel.EYRING
    cfg.folds.event_count_range = (5, 9)
    path = tmp_path / "cfg.json"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_toml_config(tmp_path: Path) -> None:
    path = tmp_path / "cfg.toml"
    path.write_text(
        'master_seed = 7\n\n[rooms]\nrt60_range = [0.2, 0.4]\nabsorption_model = "sabine"\n\n[folds]\ncount = 1\n',
        encoding="utf-8",
    )
    cfg = load_config(path)
    assert cfg.master_seed == 7
    assert cfg.rooms.rt60_range == (0.2, 0.4)
    assert cfg.rooms.absorption_model == AbsorptionModel.SABINE
    assert cfg.folds.count == 1


@pytest.mark.parametrize(
    ("payload", "message"),
    [
        ({"rooms": {"bogus": 1}}, "Unknown config key: rooms.bogus"),
        ({"rooms": {"rt60_range": [0.1]}}, "expected 2 values"),
        ({"encoding": {"convention": "fuma"}}, "is not one of"),
        ({"jobs": "four"}, "expected an integer"),
        ({"folds": 3}, "must be a table"),
    ],
)
def test_bad_payloads(payload: dict, message: str) -> None:
    with pytest.raises(ValueError, match=message):
        config_from_dict(payload)


def test_validation_rejects_out_of_range_values() -> None:
    cfg = PipelineConfig()
    cfg.rooms.rt60_range = (0.01, 0.5)
    with pytest.raises(ValueError, match="rt60_range"):
        validate_config(cfg)
    cfg = PipelineConfig()
    cfg.elimination.f_max = 20000.0
    with pytest.raises(ValueError, match="Nyquist"):
        validate_config(cfg)
    cfg = PipelineConfig()
    cfg.encoding.reg_max_gain_db = float("inf")
    with pytest.raises(ValueError):
        validate_config(cfg)
    cfg = PipelineConfig()
    cfg.encoding.order = 2
    cfg.encoding.trunc_order = 1
    with pytest.raises(ValueError, match="below encoding.order"):
        validate_config(cfg)
    cfg.encoding.trunc_order = 2
    validate_config(cfg)


def test_missing_files(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.toml")
    bad = tmp_path / "cfg.yaml"
    bad.write_text("", encoding="utf-8")
    with pytest.raises(ValueError):
        load_config(bad)
    cfg = PipelineConfig()
    with pytest.raises(FileNotFoundError, match="dataset_audio"):
        validate_paths(cfg, needs_dataset=True)
    cfg.paths.array_file = str(tmp_path / "missing.txt")
    with pytest.raises(FileNotFoundError, match="Array geometry"):
        validate_paths(cfg)


def test_digest_tracks_content() -> None:
    first = PipelineConfig()
    second = PipelineConfig()
    assert config_digest(first.rooms) == config_digest(second.rooms)
    second.rooms.rt60_range = (0.2, 0.5)
    assert config_digest(first.rooms) != config_digest(second.rooms)
    assert config_digest({"a": 1}) == config_digest({"a": 1})
    assert config_to_dict(first)["rooms"]["absorption_model"] == "image"
