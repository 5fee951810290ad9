from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from conftest import foa_plane_wave
from core.array import band_intensity_doa, intensity_doa
from core.augment import (
    _peak_polyphony,
    assign_tracks,
    clip_seed,
    generate_folds,
    label_frames,
    render_clip,
    sample_plan,
)
from core.bank import RirBank, SourceBank, rir_entry
from core.config import EncodingConfig, PipelineConfig, RenderConfig, RoomSamplingConfig
from core.io import file_sha256, load_json
from core.room import rir_length, sample_placement, sample_room, simulate_sh_rir
from core.types import (
    FoldSpec,
    MixturePlan,
    PlannedEvent,
    RirEntry,
    SourceEntry,
    SphDirection,
    great_circle,
)

FS = 24000
HOP = 2400


def impulse_rir(azimuth: float, elevation: float = 0.0, length: int = 64, delay: int = 5) -> np.ndarray:
    pulse = np.zeros(length)
    pulse[delay] = 1.0
    return foa_plane_wave(pulse, azimuth, elevation)


def make_sources(rng: np.random.Generator, classes: Sequence[int], seconds: float = 0.5, scales: Sequence[float] = ()) -> SourceBank:
    entries, arrays = [], {}
    for i, class_id in enumerate(classes):
        scale = scales[i] if scales else 0.1
        audio = scale * rng.standard_normal(int(seconds * FS))
        source_id = f"src{i:03d}"
        entries.append(SourceEntry(source_id, class_id, source_id, float(np.sqrt(np.mean(audio**2)))))
        arrays[source_id] = audio
    return SourceBank(entries, arrays=arrays)


def make_rirs(directions: Sequence[Tuple[float, float]], rooms: Sequence[int] = ()) -> RirBank:
    entries, arrays = [], {}
    for i, (azimuth, elevation) in enumerate(directions):
        rir_id = f"rir{i:03d}"
        room_id = rooms[i] if rooms else 1
        entries.append(RirEntry(rir_id, room_id, (6.0, 5.0, 3.0), 0.3, azimuth, elevation, 1.5))
        arrays[rir_id] = impulse_rir(azimuth, elevation)
    return RirBank(entries, arrays=arrays)


def small_fold(**overrides) -> FoldSpec:
    values = dict(fold_id=7, clip_count=1, clip_duration=10.0, event_count_range=(5, 8), polyphony_cap=3)
    values.update(overrides)
    return FoldSpec(**values)


def quiet() -> RenderConfig:
    return RenderConfig(noise_enabled=False)


def test_clip_seed_depends_on_key_only() -> None:
    assert clip_seed(42, "fold7_mix000") == clip_seed(42, "fold7_mix000")
    assert clip_seed(42, "fold7_mix000") != clip_seed(42, "fold7_mix001")
    assert clip_seed(42, "fold7_mix000") != clip_seed(43, "fold7_mix000")
    assert 0 <= clip_seed(0, "x") < 2**63


def test_same_seed_same_plan(rng: np.random.Generator) -> None:
    sources = make_sources(rng, [0, 1, 2, 3])
    rirs = make_rirs([(0, 0), (90, 10), (-90, -10), (180, 0)])
    first = sample_plan(11, sources, rirs, small_fold(), RenderConfig(), FS, "c")
    second = sample_plan(11, sources, rirs, small_fold(), RenderConfig(), FS, "c")
    assert first == second
    assert first != sample_plan(12, sources, rirs, small_fold(), RenderConfig(), FS, "c")
    assert first.noise is not None


def test_plans_respect_polyphony_and_duration(rng: np.random.Generator) -> None:
    sources = make_sources(rng, [0, 1, 2])
    rirs = make_rirs([(0, 0), (90, 0)])
    fold = small_fold(event_count_range=(30, 40), polyphony_cap=2)
    for seed in range(20):
        plan = sample_plan(seed, sources, rirs, fold, quiet(), FS, "c")
        extents = [(e.onset, e.onset + sources.length(e.source_id) + rirs.length(e.rir_id) - 1) for e in plan.events]
        assert _peak_polyphony(extents, 0, plan.duration) <= 2
        assert all(0 <= lo and hi <= plan.duration for lo, hi in extents)
        assert [e.onset for e in plan.events] == sorted(e.onset for e in plan.events)


def test_single_room_per_clip(rng: np.random.Generator) -> None:
    sources = make_sources(rng, [0, 1])
    rirs = make_rirs([(0, 0), (90, 0), (-90, 0), (45, 20)], rooms=[1, 1, 2, 2])
    for seed in range(10):
        plan = sample_plan(seed, sources, rirs, small_fold(), quiet(), FS, "c")
        assert {rirs.get(e.rir_id).room_id for e in plan.events} == {plan.room_id}


def test_empty_banks_rejected(rng: np.random.Generator) -> None:
    rirs = make_rirs([(0, 0)])
    with pytest.raises(ValueError, match="Source bank is empty"):
        sample_plan(0, SourceBank([], arrays={}), rirs, small_fold())
    with pytest.raises(ValueError, match="RIR bank is empty"):
        sample_plan(0, make_sources(rng, [0]), RirBank([], arrays={}), small_fold())


def test_track_ids_reuse_the_smallest_free_slot() -> None:
    assert assign_tracks([(0, 10), (5, 15), (12, 20), (16, 30)]) == [0, 1, 0, 1]
    assert assign_tracks([(0, 10), (2, 8), (4, 6)]) == [0, 1, 2]
    assert assign_tracks([]) == []


def test_label_frames_round_to_the_majority() -> None:
    assert label_frames(3600, 4800, HOP) == range(2, 4)
    assert label_frames(0, 2400, HOP) == range(0, 1)
    assert label_frames(100, 10, HOP) == range(0, 1)


def test_rendered_event_points_at_its_rir(rng: np.random.Generator) -> None:
    sources = make_sources(rng, [5], seconds=1.0)
    rirs = make_rirs([(90, 0)])
    plan = MixturePlan("c", 0, [PlannedEvent("src000", "rir000", 2 * FS, 0.0)], None, 5 * FS)
    clip = render_clip(plan, sources, rirs, quiet(), sample_rate=FS)
    event = clip.audio[:, 2 * FS : 3 * FS]
    doa = intensity_doa(event)
    assert math.degrees(great_circle(doa, SphDirection.from_degrees(90, 0))) < 10.0
    assert [f.frame_index for f in clip.labels] == list(range(20, 30))
    assert {(f.class_id, f.track_id, f.azimuth_deg, f.elevation_deg) for f in clip.labels} == {(5, 0, 90.0, 0.0)}
    assert clip.audio.shape == (4, 5 * FS)


def test_active_frames_stand_out_from_noise(rng: np.random.Generator) -> None:
    sources = make_sources(rng, [1], seconds=1.0)
    rirs = make_rirs([(30, 10)])
    cfg = RenderConfig(snr_range=(30.0, 30.0))
    plan = sample_plan(5, sources, rirs, small_fold(event_count_range=(2, 2)), cfg, FS, "c")
    clip = render_clip(plan, sources, rirs, cfg, sample_rate=FS)
    frames = clip.audio[0, : clip.audio.shape[1] // HOP * HOP].reshape(-1, HOP)
    active = sorted({f.frame_index for f in clip.labels})
    silent = [i for i in range(frames.shape[0]) if all(abs(i - a) > 2 for a in active)]
    level = 10 * np.log10(np.mean(frames**2, axis=1))
    assert level[active].mean() - level[silent].mean() >= 20.0


def test_loudness_follows_class_median(rng: np.random.Generator) -> None:
    sources = make_sources(rng, [2, 2], seconds=1.0, scales=[0.1, 0.4])
    median = sources.class_median_rms()[2]
    rirs = RirBank([RirEntry("w", 1, (6.0, 5.0, 3.0), 0.3, 0.0, 0.0, 1.5)], arrays={"w": np.eye(4, 1)})
    for source_id in ("src000", "src001"):
        plan = MixturePlan("c", 0, [PlannedEvent(source_id, "w", 0, 0.0)], None, 2 * FS)
        clip = render_clip(plan, sources, rirs, quiet(), sample_rate=FS)
        level = np.sqrt(np.mean(clip.audio[0, :FS] ** 2)) * 10 ** (-clip.trim_db / 20)
        assert level == pytest.approx(median, rel=1e-9)


def test_clipping_is_trimmed(rng: np.random.Generator) -> None:
    sources = make_sources(rng, [0], seconds=0.5)
    rirs = make_rirs([(0, 0)])
    plan = MixturePlan("c", 0, [PlannedEvent("src000", "rir000", 0, 0.0)], None, FS)
    clip = render_clip(plan, sources, rirs, quiet(), class_rms={0: 3.0}, sample_rate=FS)
    assert clip.trim_db < 0
    assert np.max(np.abs(clip.audio)) == pytest.approx(10 ** (-1 / 20))


def test_event_overrunning_clip_rejected(rng: np.random.Generator) -> None:
    sources = make_sources(rng, [0], seconds=0.5)
    rirs = make_rirs([(0, 0)])
    plan = MixturePlan("c", 0, [PlannedEvent("src000", "rir000", FS // 2 + 100, 0.0)], None, FS)
    with pytest.raises(ValueError, match="overruns"):
        render_clip(plan, sources, rirs, quiet(), sample_rate=FS)


def test_class_and_direction_drawn_independently(rng: np.random.Generator) -> None:
    sources = make_sources(rng, [0, 0, 1, 2, 2, 2], seconds=0.1)
    directions = [(-135, 0), (-45, 0), (45, 0), (135, 0)]
    rirs = make_rirs(directions)
    fold = small_fold(event_count_range=(1, 1), clip_duration=1.0)
    table = np.zeros((3, 4), dtype=int)
    for i in range(10_000):
        event = sample_plan(clip_seed(0, str(i)), sources, rirs, fold, quiet(), FS, "c", single_room=False).events[0]
        table[sources.get(event.source_id).class_id, int(event.rir_id[3:])] += 1
    _, p_value, _, _ = chi2_contingency(table)
    assert p_value > 0.01


def fold_config(seed: int = 3) -> PipelineConfig:
    cfg = PipelineConfig(master_seed=seed)
    cfg.folds.count = 1
    cfg.folds.clips_per_fold = 2
    cfg.folds.clip_duration = 3.0
    cfg.folds.event_count_range = (2, 3)
    return cfg


def fold_files(root: Path) -> Dict[str, str]:
    return {str(p.relative_to(root)): file_sha256(p) for p in sorted(root.rglob("*")) if p.is_file()}


def test_generated_folds_are_reproducible(tmp_path: Path) -> None:
    def banks() -> Tuple[SourceBank, RirBank]:
        rng = np.random.default_rng(8)
        return make_sources(rng, [0, 1, 2]), make_rirs([(0, 0), (120, 20), (-120, -20)])

    first = generate_folds(fold_config(), *banks(), tmp_path / "a", jobs=2)
    second = generate_folds(fold_config(), *banks(), tmp_path / "b", jobs=1)
    assert [p.name for p in first] == ["fold7"]
    assert fold_files(tmp_path / "a") == fold_files(tmp_path / "b")
    manifest = load_json(tmp_path / "a" / "fold7" / "manifest.json")
    assert manifest["fold_id"] == 7
    assert manifest["master_seed"] == 3
    assert len(manifest["clips"]) == 2
    assert all(clip["name"].startswith("fold7_room1_mix") for clip in manifest["clips"])

    done: List[int] = []
    generate_folds(fold_config(), *banks(), tmp_path / "a", on_done=done.append)
    assert done == [2]
    assert fold_files(tmp_path / "a") == fold_files(tmp_path / "b")

    generate_folds(fold_config(seed=4), *banks(), tmp_path / "c")
    assert fold_files(tmp_path / "c") != fold_files(tmp_path / "a")


@pytest.mark.slow
def test_labels_match_rendered_directions(em32) -> None:
    rng = np.random.default_rng(21)
    rooms = RoomSamplingConfig(
        rt60_range=(0.2, 0.2),
        length_range=(6.0, 8.0),
        width_range=(6.0, 8.0),
        height_range=(3.0, 3.5),
        distance_range=(1.0, 1.2),
    )
    room, _ = sample_room(rng, rooms)
    entries, arrays = [], {}
    for i in range(8):
        placement = sample_placement(rng, room, rooms)
        ir = simulate_sh_rir(room, placement, em32, EncodingConfig(), rir_length(room.rt60, FS), rooms)
        entry = rir_entry(f"room01_rir{i:03d}", 1, room, placement)
        entries.append(entry)
        arrays[entry.rir_id] = ir.channels
    rirs = RirBank(entries, arrays=arrays)
    sources = make_sources(rng, [0, 1, 2, 3], seconds=1.0)
    fold = small_fold(clip_duration=20.0, event_count_range=(6, 8), polyphony_cap=1)
    passed = total = 0
    for seed in range(3):
        plan = sample_plan(seed, sources, rirs, fold, quiet(), FS, "c")
        clip = render_clip(plan, sources, rirs, quiet(), sample_rate=FS)
        assert clip.placed_events >= 3
        for label in clip.labels:
            frame = clip.audio[:, label.frame_index * HOP : (label.frame_index + 1) * HOP]
            if not np.any(frame[0]):
                continue
            doa = band_intensity_doa(frame, FS)
            total += 1
            passed += math.degrees(great_circle(doa, label.direction)) <= 20.0
    assert total > 0
    assert passed >= 0.95 * total
