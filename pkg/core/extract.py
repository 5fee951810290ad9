from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from core.config import ExtractionConfig
from core.types import EventSegment, LabelFrame, SphDirection, great_circle

logger = logging.getLogger(__name__)


@dataclass
class _Run:
    key: Tuple[int, int]
    first: int
    last: int
    vectors: List[np.ndarray]


def _frames_by_index(labels: List[LabelFrame]) -> Dict[int, List[LabelFrame]]:
    grouped: Dict[int, List[LabelFrame]] = {}
    previous = -1
    for label in labels:
        if label.frame_index < previous:
            raise ValueError(f"Labels must be sorted by frame; frame {label.frame_index} follows {previous}")
        previous = label.frame_index
        grouped.setdefault(label.frame_index, []).append(label)
    return grouped


def _single_source_runs(grouped: Dict[int, List[LabelFrame]], num_frames: int) -> List[_Run]:
    runs: List[_Run] = []
    current: Optional[_Run] = None
    for frame in range(num_frames):
        active = grouped.get(frame, [])
        if len(active) == 1:
            label = active[0]
            key = (label.class_id, label.track_id)
            if current is not None and current.key == key and current.last == frame - 1:
                current.last = frame
                current.vectors.append(label.direction.to_vector())
                continue
            if current is not None:
                runs.append(current)
            current = _Run(key=key, first=frame, last=frame, vectors=[label.direction.to_vector()])
        else:
            if current is not None:
                runs.append(current)
            current = None
    if current is not None:
        runs.append(current)
    return runs


def mean_direction(vectors: List[np.ndarray]) -> SphDirection:
    total = np.sum(vectors, axis=0)
    if np.linalg.norm(total) < 1e-9:
        raise ValueError("Directions cancel out; no mean direction.")
    return SphDirection.from_vector(total)


def is_static(vectors: List[np.ndarray], tol_deg: float) -> Tuple[bool, Optional[SphDirection]]:
    try:
        center = mean_direction(vectors)
    except ValueError:
        return False, None
    tol = math.radians(tol_deg)
    for vector in vectors:
        if great_circle(center, SphDirection.from_vector(vector)) > tol:
            return False, center
    return True, center


def extract_events(
    audio: np.ndarray,
    labels: List[LabelFrame],
    cfg: ExtractionConfig,
    sample_rate: int,
    clip_id: str,
    min_samples: int = 1,
) -> List[EventSegment]:
    """Cut the static single-source stretches of a clip out as segments."""
    audio = np.atleast_2d(audio)
    hop = int(round(cfg.label_hop_s * sample_rate))
    num_samples = audio.shape[-1]
    num_frames = int(math.ceil(num_samples / hop))
    grouped = _frames_by_index(labels)
    beyond = [f for f in grouped if f >= num_frames]
    if beyond:
        logger.debug("%s: %d label frames beyond the audio are ignored", clip_id, len(beyond))

    segments: List[EventSegment] = []
    taken_until = 0
    for run in _single_source_runs(grouped, num_frames):
        length = run.last - run.first + 1
        if length < cfg.min_frames:
            continue
        static, center = is_static(run.vectors, cfg.staticity_tol_deg)
        if not static or center is None:
            logger.debug("%s: frames %d-%d moving, skipped", clip_id, run.first, run.last)
            continue
        start_frame = run.first
        for _ in range(cfg.guard_frames):
            candidate = start_frame - 1
            if candidate < max(taken_until, 0) or grouped.get(candidate):
                break
            start_frame = candidate
        stop_frame = run.last + 1
        for _ in range(cfg.guard_frames):
            if stop_frame >= num_frames or grouped.get(stop_frame):
                break
            stop_frame += 1
        start = start_frame * hop
        end = min(stop_frame * hop, num_samples)
        if end - start < max(min_samples, 1):
            continue
        taken_until = stop_frame
        segments.append(
            EventSegment(
                audio=np.array(audio[:, start:end], copy=True),
                class_id=run.key[0],
                doa=center,
                source_clip=clip_id,
                start=start,
                end=end,
                frame_start=run.first,
                frame_end=run.last + 1,
                index=len(segments),
                sample_rate=sample_rate,
            )
        )
    logger.debug("%s: %d segments", clip_id, len(segments))
    return segments


def iter_dataset(audio_dir: Path, metadata_dir: Path, clip_glob: str = "fold[1234]_*") -> Iterator[Tuple[str, Path, Path]]:
    """(clip_id, audio_path, metadata_path) pairs matched by file stem."""
    if not audio_dir.is_dir():
        raise FileNotFoundError(f"Audio directory not found: {audio_dir}")
    if not metadata_dir.is_dir():
        raise FileNotFoundError(f"Metadata directory not found: {metadata_dir}")
    metadata = {}
    for path in sorted(metadata_dir.rglob("*.csv")):
        metadata.setdefault(path.stem, path)
    for audio_path in sorted(audio_dir.rglob(f"{clip_glob}.wav")):
        if audio_path.stem not in metadata:
            raise FileNotFoundError(f"No metadata file for clip {audio_path.stem} under {metadata_dir}")
        yield audio_path.stem, audio_path, metadata[audio_path.stem]
