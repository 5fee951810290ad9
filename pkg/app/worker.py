from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from core.array import default_array, load_array_spec
from core.augment import fold_digest, generate_folds
from core.bank import (
    BankManifest,
    RirBank,
    SourceBank,
    bank_summary,
    iter_segments,
    rir_entry,
    source_entry,
    write_rir,
    write_rir_index,
    write_segment,
    write_segment_index,
    write_source,
    write_source_index,
)
from core.config import PipelineConfig, config_digest, validate_config, validate_paths
from core.dsp import stft_sizes
from core.eliminate import Detector, EliminationReport, format_report, read_verdicts, resolve_detector, run_elimination, write_verdicts
from core.enhance import enhance_segment
from core.extract import extract_events, iter_dataset
from core.io import parse_metadata, read_wav, save_json
from core.parallel import ProgressHook, map_ordered
from core.room import rir_length, sample_placement, sample_room, simulate_sh_rir
from core.types import ArraySpec, EventSegment, Placement, RoomSpec, SourceEntry

logger = logging.getLogger(__name__)

RIR_STREAM = 1


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"Stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


class StageCancelled(RuntimeError):
    pass


class StageRunner:
    """Runs pipeline stages against the on-disk banks named in the config."""

    def __init__(
        self,
        cfg: PipelineConfig,
        log: Optional[Callable[[str], None]] = None,
        progress: Optional[Callable[[str, int, int], None]] = None,
        detector: Optional[Detector] = None,
        show_progress: bool = False,
    ) -> None:
        validate_config(cfg)
        self.cfg = cfg
        self.log = log or logger.info
        self.progress = progress
        self.detector = detector
        self.show_progress = show_progress
        self._cancel = False

    def cancel(self) -> None:
        self._cancel = True

    def run(self, stage: str, **kwargs: Any) -> Any:
        handlers: Dict[str, Callable[..., Any]] = {
            "simulate-rir": self.simulate_rirs,
            "extract": self.extract,
            "eliminate": self.eliminate,
            "enhance": self.enhance,
            "augment": self.augment,
            "inspect": self.inspect,
            "run-all": self.run_all,
        }
        if stage not in handlers:
            raise ValueError(f"Unknown stage: {stage}")
        try:
            return handlers[stage](**kwargs)
        except (StageError, StageCancelled):
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc

    def _check_cancel(self) -> None:
        if self._cancel:
            raise StageCancelled("Cancelled")

    def _tracker(self, stage: str, total: int) -> Tuple[ProgressHook, tqdm]:
        bar = tqdm(total=total, desc=stage, unit="item", disable=not self.show_progress, leave=False)
        done = [0]

        def hook(count: int) -> None:
            self._check_cancel()
            bar.update(count)
            done[0] += count
            if self.progress is not None:
                self.progress(stage, done[0], total)

        return hook, bar

    def _map(self, stage: str, fn: Callable[[Any], Any], items: List[Any]) -> List[Any]:
        hook, bar = self._tracker(stage, len(items))

        def guarded(item: Any) -> Any:
            self._check_cancel()
            return fn(item)

        try:
            return map_ordered(guarded, items, self.cfg.jobs, hook)
        finally:
            bar.close()

    def _array(self) -> ArraySpec:
        if self.cfg.paths.array_file:
            return load_array_spec(Path(self.cfg.paths.array_file), sample_rate=self.cfg.sample_rate)
        return default_array(self.cfg.sample_rate)

    def rir_digest(self, array: ArraySpec) -> str:
        return config_digest(
            {
                "sample_rate": self.cfg.sample_rate,
                "master_seed": self.cfg.master_seed,
                "rooms": asdict(self.cfg.rooms),
                "encoding": asdict(self.cfg.encoding),
                "array": {"radius": array.radius, "mics": [d.degrees for d in array.mic_dirs]},
            }
        )

    def plan_rirs(self, rooms: int, per_room: int) -> List[Tuple[str, int, RoomSpec, Placement]]:
        """Room and placement draws, one generator per room so counts per room never shift other rooms."""
        plan = []
        for room_id in range(1, rooms + 1):
            rng = np.random.default_rng([self.cfg.master_seed, RIR_STREAM, room_id])
            room, alpha = sample_room(rng, self.cfg.rooms)
            logger.debug("Room %d: dims %s rt60 %.3f alpha %.3f", room_id, room.dims, room.rt60, alpha)
            for index in range(per_room):
                placement = sample_placement(rng, room, self.cfg.rooms)
                plan.append((f"room{room_id:02d}_rir{index:03d}", room_id, room, placement))
        return plan

    def simulate_rirs(self, count: Optional[int] = None, rooms: Optional[int] = None) -> RirBank:
        per_room = self.cfg.rooms.rirs_per_room if count is None else count
        rooms = self.cfg.rooms.rooms if rooms is None else rooms
        if per_room < 1 or rooms < 1:
            raise ValueError(f"Need at least one room and one RIR per room, got rooms={rooms} count={per_room}")
        validate_paths(self.cfg)
        array = self._array()
        root = self.cfg.paths.rir_bank
        root.mkdir(parents=True, exist_ok=True)
        manifest = BankManifest(root, self.rir_digest(array))
        plan = self.plan_rirs(rooms, per_room)
        self.log(f"Simulating {len(plan)} RIRs in {rooms} rooms...")

        def simulate(item: Tuple[str, int, RoomSpec, Placement]) -> None:
            rir_id, _, room, placement = item
            path = root / f"{rir_id}.wav"
            if manifest.is_current(rir_id, path):
                return
            length = rir_length(room.rt60, self.cfg.sample_rate, self.cfg.rooms.length_factor)
            ir = simulate_sh_rir(room, placement, array, self.cfg.encoding, length, self.cfg.rooms, seed=self.cfg.master_seed)
            manifest.record(rir_id, write_rir(root, rir_id, ir))

        self._map("simulate-rir", simulate, plan)
        write_rir_index(root, [rir_entry(rir_id, room_id, room, placement) for rir_id, room_id, room, placement in plan])
        manifest.save()
        return RirBank.load(root)

    def extract(self) -> int:
        validate_paths(self.cfg, needs_dataset=True)
        paths = self.cfg.paths
        clips = list(iter_dataset(Path(paths.dataset_audio), Path(paths.dataset_metadata), self.cfg.extraction.clip_glob))
        if not clips:
            raise FileNotFoundError(f"No clips matching {self.cfg.extraction.clip_glob}.wav under {paths.dataset_audio}")
        root = paths.segment_bank
        root.mkdir(parents=True, exist_ok=True)
        manifest = BankManifest(root, config_digest({"sample_rate": self.cfg.sample_rate, **asdict(self.cfg.extraction)}))
        self.log(f"Extracting events from {len(clips)} clips...")

        min_samples = stft_sizes(self.cfg.sample_rate, self.cfg.stft.frame_ms, self.cfg.stft.hop_ms)[0]

        def extract_clip(item: Tuple[str, Path, Path]) -> List[EventSegment]:
            clip_id, audio_path, meta_path = item
            audio, sample_rate = read_wav(audio_path)
            if sample_rate != self.cfg.sample_rate:
                raise ValueError(f"{audio_path}: sample rate {sample_rate}, expected {self.cfg.sample_rate}")
            segments = extract_events(audio, parse_metadata(meta_path), self.cfg.extraction, sample_rate, clip_id, min_samples)
            for segment in segments:
                path = root / f"{segment.segment_id}.wav"
                if not manifest.is_current(segment.segment_id, path):
                    manifest.record(segment.segment_id, write_segment(root, segment))
            return segments

        segments = [s for group in self._map("extract", extract_clip, clips) for s in group]
        write_segment_index(root, segments)
        manifest.save()
        self.log(f"Extracted {len(segments)} events")
        return len(segments)

    def eliminate(self) -> EliminationReport:
        segments = list(iter_segments(self.cfg.paths.segment_bank))
        detector = self.detector or resolve_detector(self.cfg.elimination.detector, self.cfg.extraction.label_hop_s)
        self.log(f"Eliminating interference in {len(segments)} segments...")
        total = len(segments) * (int(self.cfg.elimination.use_detection) + int(self.cfg.elimination.use_eigenvalue))
        hook, bar = self._tracker("eliminate", total)
        try:
            _, report = run_elimination(segments, self.cfg.elimination, self.cfg.stft, detector, self.cfg.jobs, hook)
        finally:
            bar.close()
        write_verdicts(report, self.cfg.paths.elimination_dir)
        self.log(
            f"Extracted {report.extracted}, detection-eliminated {report.detection_eliminated}, "
            f"eigenvalue-eliminated {report.eigen_eliminated}, kept {report.kept}"
        )
        return report

    def enhance(self) -> int:
        kept = read_verdicts(self.cfg.paths.elimination_dir).kept_ids()
        segments = list(iter_segments(self.cfg.paths.segment_bank, kept))
        root = self.cfg.paths.source_bank
        root.mkdir(parents=True, exist_ok=True)
        manifest = BankManifest(
            root, config_digest({"enhancement": asdict(self.cfg.enhancement), "stft": asdict(self.cfg.stft)})
        )
        self.log(f"Enhancing {len(segments)} kept segments...")

        def enhance(segment: EventSegment) -> SourceEntry:
            path = root / f"{segment.segment_id}.wav"
            if manifest.is_current(segment.segment_id, path):
                audio, _ = read_wav(path)
                rms = float(np.sqrt(np.mean(audio.astype(float) ** 2))) if audio.size else 0.0
                return SourceEntry(segment.segment_id, segment.class_id, segment.segment_id, rms)
            source = enhance_segment(segment, self.cfg.enhancement, self.cfg.stft)
            manifest.record(segment.segment_id, write_source(root, source))
            return source_entry(source)

        entries = self._map("enhance", enhance, segments)
        write_source_index(root, entries)
        manifest.save()
        return len(entries)

    def augment(self) -> List[Path]:
        sources = SourceBank.load(self.cfg.paths.source_bank)
        rirs = RirBank.load(self.cfg.paths.rir_bank)
        self.log(f"Generating {self.cfg.folds.count} folds from {len(sources)} sources and {len(rirs)} RIRs...")
        hook, bar = self._tracker("augment", self.cfg.folds.count * self.cfg.folds.clips_per_fold)
        try:
            return generate_folds(self.cfg, sources, rirs, Path(self.cfg.paths.output_dir), self.cfg.jobs, hook)
        finally:
            bar.close()

    def inspect(self) -> str:
        paths = self.cfg.paths
        lines = []
        for name, root in (("rirs", paths.rir_bank), ("segments", paths.segment_bank), ("sources", paths.source_bank)):
            lines.append(f"[{name}] {root}")
            lines.append(json.dumps(bank_summary(root), indent=2))
        if (paths.elimination_dir / "verdicts.csv").is_file():
            lines.append(f"[elimination] {paths.elimination_dir}")
            lines.append(format_report(read_verdicts(paths.elimination_dir)).rstrip("\n"))
        return "\n".join(lines) + "\n"

    def run_all(self) -> Dict[str, Any]:
        validate_paths(self.cfg, needs_dataset=True)
        array = self._array()
        record: Dict[str, Any] = {"master_seed": self.cfg.master_seed, "stages": []}
        self.run("simulate-rir")
        record["stages"].append({"stage": "simulate-rir", "digest": self.rir_digest(array)})
        record["stages"].append({"stage": "extract", "segments": self.run("extract")})
        report = self.run("eliminate")
        record["stages"].append(
            {
                "stage": "eliminate",
                "extracted": report.extracted,
                "detection_eliminated": report.detection_eliminated,
                "eigen_eliminated": report.eigen_eliminated,
                "kept": report.kept,
            }
        )
        record["stages"].append({"stage": "enhance", "sources": self.run("enhance")})
        folds = self.run("augment")
        record["stages"].append(
            {"stage": "augment", "digest": fold_digest(self.cfg), "folds": [p.name for p in folds]}
        )
        save_json(record, Path(self.cfg.paths.output_dir) / "run.json")
        return record
