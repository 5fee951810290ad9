from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.bank import RirBank, SourceBank, bank_hash
from core.config import FoldsConfig, PipelineConfig, RenderConfig, config_digest
from core.dsp import fft_convolve
from core.io import emit_metadata, file_sha256, load_json, save_json, write_wav
from core.parallel import ProgressHook, map_ordered
from core.types import FoldSpec, LabelFrame, MixturePlan, NoiseSpec, PlannedEvent, RenderedClip, wrap_degrees

logger = logging.getLogger(__name__)


def clip_seed(master_seed: int, clip_key: str) -> int:
    """Seed of one clip, derived from the master seed and the clip key only."""
    digest = hashlib.sha256(f"{master_seed}:{clip_key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _peak_polyphony(intervals: List[Tuple[int, int]], start: int, end: int) -> int:
    """Largest number of intervals sounding at one instant inside [start, end)."""
    edges = []
    for lo, hi in intervals:
        lo, hi = max(lo, start), min(hi, end)
        if lo < hi:
            edges.append((lo, 1))
            edges.append((hi, -1))
    edges.sort(key=lambda e: (e[0], e[1]))
    active = peak = 0
    for _, step in edges:
        active += step
        peak = max(peak, active)
    return peak


def sample_plan(
    seed: int,
    sources: SourceBank,
    rirs: RirBank,
    fold: FoldSpec,
    cfg: Optional[RenderConfig] = None,
    sample_rate: int = 24000,
    clip_id: str = "",
    single_room: bool = True,
) -> MixturePlan:
    cfg = cfg or RenderConfig()
    if len(sources) == 0:
        raise ValueError("Source bank is empty; nothing to place.")
    if len(rirs) == 0:
        raise ValueError("RIR bank is empty; nothing to convolve with.")
    rng = np.random.default_rng(seed)
    duration = int(round(fold.clip_duration * sample_rate))
    room_ids = rirs.rooms()
    room_id = room_ids[int(rng.integers(len(room_ids)))] if single_room else 0
    candidates = rirs.in_room(room_id) if single_room else rirs.entries
    low, high = fold.event_count_range
    wanted = int(rng.integers(low, high + 1))

    events: List[PlannedEvent] = []
    intervals: List[Tuple[int, int]] = []
    for _ in range(wanted):
        placed = False
        for _ in range(cfg.max_attempts):
            source = sources.entries[int(rng.integers(len(sources)))]
            rir = candidates[int(rng.integers(len(candidates)))]
            extent = sources.length(source.source_id) + rirs.length(rir.rir_id) - 1
            if extent > duration:
                continue
            onset = int(rng.integers(0, duration - extent + 1))
            if _peak_polyphony(intervals, onset, onset + extent) + 1 > fold.polyphony_cap:
                continue
            gain_db = float(rng.uniform(*cfg.gain_db_range))
            events.append(PlannedEvent(source_id=source.source_id, rir_id=rir.rir_id, onset=onset, gain_db=gain_db))
            intervals.append((onset, onset + extent))
            placed = True
            break
        if not placed:
            logger.debug("%s: placed %d of %d events before running out of room", clip_id, len(events), wanted)
            break
    noise = None
    if cfg.noise_enabled:
        noise = NoiseSpec(snr_db=float(rng.uniform(*cfg.snr_range)), seed=int(rng.integers(0, 2**63 - 1)))
    events.sort(key=lambda e: (e.onset, e.source_id))
    return MixturePlan(clip_id=clip_id, seed=seed, events=events, noise=noise, duration=duration, room_id=room_id)


def assign_tracks(extents: List[Tuple[int, int]]) -> List[int]:
    """Smallest free track id for each interval, given in onset order."""
    tracks: List[int] = []
    for index, (start, end) in enumerate(extents):
        busy = {tracks[j] for j, (lo, hi) in enumerate(extents[:index]) if lo < end and start < hi}
        track = 0
        while track in busy:
            track += 1
        tracks.append(track)
    return tracks


def label_frames(onset: int, length: int, hop: int) -> range:
    """Label frames holding the majority of [onset, onset + length); at least one."""
    first = int(math.floor(onset / hop + 0.5))
    last = int(math.floor((onset + length) / hop + 0.5))
    return range(first, max(last, first + 1))


def diffuse_noise(
    rng: np.random.Generator,
    channels: int,
    samples: int,
    first_order_db: float = -3.0,
) -> np.ndarray:
    """Uncorrelated white noise per channel, channels after W attenuated by first_order_db."""
    noise = rng.standard_normal((channels, samples))
    noise[1:] *= 10 ** (first_order_db / 20)
    return noise


def render_clip(
    plan: MixturePlan,
    sources: SourceBank,
    rirs: RirBank,
    cfg: Optional[RenderConfig] = None,
    class_rms: Optional[Dict[int, float]] = None,
    sample_rate: int = 24000,
) -> RenderedClip:
    cfg = cfg or RenderConfig()
    class_rms = class_rms if class_rms is not None else sources.class_median_rms()
    hop = int(round(cfg.label_hop_s * sample_rate))
    audio: Optional[np.ndarray] = None
    extents: List[Tuple[int, int]] = []
    for event in plan.events:
        extent = sources.length(event.source_id) + rirs.length(event.rir_id) - 1
        if event.onset < 0 or event.onset + extent > plan.duration:
            raise ValueError(f"{plan.clip_id}: event {event.source_id} at {event.onset} overruns the clip")
        extents.append((event.onset, event.onset + extent))
    tracks = assign_tracks(extents)

    labels: List[LabelFrame] = []
    for event, track, (start, end) in zip(plan.events, tracks, extents):
        entry = sources.get(event.source_id)
        ir = rirs.audio(event.rir_id)
        if audio is None:
            audio = np.zeros((ir.shape[0], plan.duration))
        elif ir.shape[0] != audio.shape[0]:
            raise ValueError(f"RIR {event.rir_id} has {ir.shape[0]} channels, expected {audio.shape[0]}")
        target = class_rms.get(entry.class_id, entry.rms) * 10 ** (event.gain_db / 20)
        scale = target / entry.rms if entry.rms > 0 else 0.0
        audio[:, start:end] += fft_convolve(sources.audio(event.source_id)[None, :] * scale, ir)
        rir = rirs.get(event.rir_id)
        for frame in label_frames(event.onset, sources.length(event.source_id), hop):
            labels.append(LabelFrame(frame, entry.class_id, track, wrap_degrees(rir.azimuth_deg), rir.elevation_deg))
    if audio is None:
        channels = rirs.audio(rirs.entries[0].rir_id).shape[0] if len(rirs) else 4
        audio = np.zeros((channels, plan.duration))

    if plan.noise is not None:
        noise = diffuse_noise(np.random.default_rng(plan.noise.seed), audio.shape[0], plan.duration, cfg.first_order_noise_db)
        signal_power = float(np.mean(audio[0] ** 2))
        if signal_power > 0:
            wanted = signal_power / 10 ** (plan.noise.snr_db / 10)
            audio += noise * math.sqrt(wanted / float(np.mean(noise[0] ** 2)))
        else:
            logger.debug("%s: silent clip, noise skipped", plan.clip_id)

    trim_db = 0.0
    peak = float(np.max(np.abs(audio))) if audio.size else 0.0
    if peak > 1.0:
        factor = 10 ** (-cfg.headroom_db / 20) / peak
        audio *= factor
        trim_db = 20 * math.log10(factor)
        logger.debug("%s: peak %.2f, trimmed %.2f dB", plan.clip_id, peak, trim_db)
    if not np.all(np.isfinite(audio)):
        raise FloatingPointError(f"{plan.clip_id}: rendered audio is not finite")
    labels.sort(key=lambda f: (f.frame_index, f.track_id))
    return RenderedClip(audio=audio, labels=labels, trim_db=trim_db, placed_events=len(plan.events))


def clip_name(fold_id: int, room_id: int, index: int) -> str:
    return f"fold{fold_id}_room{room_id}_mix{index:03d}"


@dataclass
class FoldSettings:
    """Slice of the pipeline config that determines generated folds."""

    sample_rate: int
    master_seed: int
    folds: FoldsConfig
    render: RenderConfig

    @classmethod
    def of(cls, cfg: PipelineConfig) -> FoldSettings:
        return cls(cfg.sample_rate, cfg.master_seed, cfg.folds, cfg.render)


def fold_digest(cfg: PipelineConfig) -> str:
    return config_digest(FoldSettings.of(cfg))


def _render_one(
    index: int,
    fold: FoldSpec,
    cfg: PipelineConfig,
    sources: SourceBank,
    rirs: RirBank,
    class_rms: Dict[int, float],
    fold_dir: Path,
) -> dict:
    key = f"fold{fold.fold_id}_mix{index:03d}"
    seed = clip_seed(cfg.master_seed, key)
    plan = sample_plan(seed, sources, rirs, fold, cfg.render, cfg.sample_rate, key, cfg.folds.single_room_per_clip)
    clip = render_clip(plan, sources, rirs, cfg.render, class_rms, cfg.sample_rate)
    name = clip_name(fold.fold_id, plan.room_id, index)
    wav_path = fold_dir / "foa" / f"{name}.wav"
    csv_path = fold_dir / "metadata" / f"{name}.csv"
    write_wav(wav_path, clip.audio, cfg.sample_rate)
    emit_metadata(csv_path, clip.labels)
    return {
        "name": name,
        "seed": seed,
        "room_id": plan.room_id,
        "events": clip.placed_events,
        "snr_db": None if plan.noise is None else round(plan.noise.snr_db, 6),
        "trim_db": round(clip.trim_db, 6),
        "audio_sha256": file_sha256(wav_path),
        "metadata_sha256": file_sha256(csv_path),
    }


def fold_is_complete(fold_dir: Path, digest: str, banks: Dict[str, str]) -> bool:
    manifest = load_json(fold_dir / "manifest.json")
    if not manifest or manifest.get("config_digest") != digest or manifest.get("banks") != banks:
        return False
    for clip in manifest.get("clips", []):
        wav_path = fold_dir / "foa" / f"{clip['name']}.wav"
        csv_path = fold_dir / "metadata" / f"{clip['name']}.csv"
        if not wav_path.is_file() or not csv_path.is_file() or file_sha256(wav_path) != clip["audio_sha256"]:
            return False
    return True


def generate_folds(
    cfg: PipelineConfig,
    sources: SourceBank,
    rirs: RirBank,
    out_dir: Path,
    jobs: Optional[int] = None,
    on_done: Optional[ProgressHook] = None,
) -> List[Path]:
    """Render every configured fold; a fold counts as done once its manifest exists."""
    banks = {
        "sources": bank_hash(sources.root) if sources.root is not None else "memory",
        "rirs": bank_hash(rirs.root) if rirs.root is not None else "memory",
    }
    digest = fold_digest(cfg)
    class_rms = sources.class_median_rms()
    written: List[Path] = []
    for i in range(cfg.folds.count):
        fold = cfg.folds.fold_spec(i)
        fold_dir = out_dir / f"fold{fold.fold_id}"
        written.append(fold_dir)
        if fold_is_complete(fold_dir, digest, banks):
            logger.info("Fold %d is up to date, skipped", fold.fold_id)
            if on_done is not None:
                on_done(fold.clip_count)
            continue
        manifest_path = fold_dir / "manifest.json"
        if manifest_path.exists():
            manifest_path.unlink()
        logger.info("Rendering fold %d (%d clips)...", fold.fold_id, fold.clip_count)
        clips = map_ordered(
            lambda index: _render_one(index, fold, cfg, sources, rirs, class_rms, fold_dir),
            range(fold.clip_count),
            jobs,
            on_done,
        )
        save_json(
            {
                "fold_id": fold.fold_id,
                "master_seed": cfg.master_seed,
                "config_digest": digest,
                "config": json.loads(json.dumps(asdict(FoldSettings.of(cfg)))),
                "banks": banks,
                "clips": clips,
            },
            manifest_path,
        )
    return written
