from __future__ import annotations

from pathlib import Path
from typing import List, Tuple

import numpy as np
import pytest

from app.worker import StageCancelled, StageError, StageRunner
from conftest import fast_config, write_tiny_dataset
from core.bank import RirBank, SourceBank, iter_segments
from core.eliminate import AcceptAllDetector, read_verdicts
from core.io import file_sha256, load_json


def test_room_plans_do_not_shift_when_rooms_are_added(tmp_path: Path) -> None:
    runner = StageRunner(fast_config(tmp_path))
    small = runner.plan_rirs(rooms=2, per_room=3)
    large = runner.plan_rirs(rooms=3, per_room=3)
    assert [item[0] for item in small] == [item[0] for item in large[:6]]
    for (_, room_a, spec_a, place_a), (_, room_b, spec_b, place_b) in zip(small, large):
        assert room_a == room_b
        assert spec_a == spec_b
        np.testing.assert_array_equal(place_a.source_pos, place_b.source_pos)
    assert small[0][0] == "room01_rir000"


def test_simulated_bank_is_reused(tmp_path: Path) -> None:
    runner = StageRunner(fast_config(tmp_path))
    bank = runner.run("simulate-rir")
    assert isinstance(bank, RirBank)
    assert len(bank) == 2
    assert bank.rooms() == [1]
    assert bank.audio("room01_rir000").shape[0] == 4
    root = runner.cfg.paths.rir_bank
    before = {p.name: file_sha256(p) for p in root.glob("*.wav")}
    mtimes = {p.name: p.stat().st_mtime_ns for p in root.glob("*.wav")}
    runner.run("simulate-rir")
    assert {p.name: file_sha256(p) for p in root.glob("*.wav")} == before
    assert {p.name: p.stat().st_mtime_ns for p in root.glob("*.wav")} == mtimes
    assert set(load_json(root / "manifest.json")["entries"]) == {"room01_rir000", "room01_rir001"}


def test_stage_errors_are_wrapped(tmp_path: Path) -> None:
    runner = StageRunner(fast_config(tmp_path))
    with pytest.raises(StageError) as info:
        runner.run("enhance")
    assert info.value.stage == "enhance"
    assert isinstance(info.value.cause, FileNotFoundError)
    with pytest.raises(ValueError, match="Unknown stage"):
        runner.run("train")


def test_cancel_stops_the_stage(tmp_path: Path) -> None:
    runner = StageRunner(fast_config(tmp_path))
    runner.cancel()
    with pytest.raises(StageCancelled):
        runner.run("simulate-rir")


def test_stages_through_the_banks(tmp_path: Path) -> None:
    audio_dir, meta_dir = write_tiny_dataset(tmp_path / "data")
    cfg = fast_config(tmp_path)
    cfg.paths.dataset_audio = str(audio_dir)
    cfg.paths.dataset_metadata = str(meta_dir)
    progress: List[Tuple[str, int, int]] = []
    messages: List[str] = []
    runner = StageRunner(cfg, log=messages.append, progress=lambda *p: progress.append(p), detector=AcceptAllDetector())

    assert runner.run("extract") == 2
    segments = list(iter_segments(cfg.paths.segment_bank))
    assert [s.class_id for s in segments] == [1, 2]
    assert segments[0].segment_id == "fold1_room1_mix001_seg000"

    report = runner.run("eliminate")
    assert (report.extracted, report.kept) == (2, 2)
    assert read_verdicts(cfg.paths.elimination_dir).kept_ids() == [s.segment_id for s in segments]

    assert runner.run("enhance") == 2
    sources = SourceBank.load(cfg.paths.source_bank)
    assert sources.audio("fold1_room1_mix001_seg000").ndim == 1
    assert sources.audio("fold1_room1_mix001_seg000").shape[0] == segments[0].end - segments[0].start

    runner.run("simulate-rir")
    folds = runner.run("augment")
    assert [p.name for p in folds] == ["fold7"]
    assert len(list((folds[0] / "foa").glob("*.wav"))) == 2
    assert len(list((folds[0] / "metadata").glob("*.csv"))) == 2
    assert ("augment", 2, 2) in progress
    assert any(message.startswith("Extracted 2 events") for message in messages)

    text = runner.run("inspect")
    assert "[rirs]" in text
    assert "kept: 2" in text


@pytest.mark.parametrize(("frame_ms", "expected"), [(80.0, 2), (120.0, 0)])
def test_extracted_events_cover_one_stft_frame(tmp_path: Path, frame_ms: float, expected: int) -> None:
    audio_dir, meta_dir = write_tiny_dataset(tmp_path / "data")
    cfg = fast_config(tmp_path)
    cfg.paths.dataset_audio = str(audio_dir)
    cfg.paths.dataset_metadata = str(meta_dir)
    cfg.extraction.label_hop_s = 0.005
    cfg.extraction.guard_frames = 0
    cfg.stft.frame_ms = frame_ms
    assert StageRunner(cfg).run("extract") == expected
