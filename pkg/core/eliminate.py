from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from core.config import EliminationConfig, StftConfig
from core.dsp import normalized_eigenvalues, spatial_covariance, stft, stft_sizes
from core.io import MetadataError, read_rows, write_rows
from core.parallel import ProgressHook, map_ordered
from core.types import EventSegment

logger = logging.getLogger(__name__)


class DetectorError(RuntimeError):
    def __init__(self, segment_id: str, cause: Exception) -> None:
        super().__init__(f"Detector failed on segment {segment_id}: {cause}")
        self.segment_id = segment_id


class Detector:
    """Reports, per labeled frame of a segment, the set of classes a model detects."""

    name = "detector"
    thread_safe = True

    def detect(self, segment: EventSegment) -> List[Set[int]]:
        raise NotImplementedError


class AcceptAllDetector(Detector):
    name = "accept-all"

    def detect(self, segment: EventSegment) -> List[Set[int]]:
        return [{segment.class_id} for _ in range(segment.frame_end - segment.frame_start)]


class RejectAllDetector(Detector):
    name = "reject-all"

    def detect(self, segment: EventSegment) -> List[Set[int]]:
        return [set() for _ in range(segment.frame_end - segment.frame_start)]


class EnergyDetector(Detector):
    name = "energy"

    def __init__(self, threshold_dbfs: float = -50.0, hop_s: float = 0.1) -> None:
        self.threshold_dbfs = threshold_dbfs
        self.hop_s = hop_s

    def detect(self, segment: EventSegment) -> List[Set[int]]:
        hop = int(round(self.hop_s * segment.sample_rate))
        channel = segment.audio[0]
        out: List[Set[int]] = []
        for frame in range(segment.frame_start, segment.frame_end):
            lo = max(frame * hop - segment.start, 0)
            hi = min((frame + 1) * hop - segment.start, channel.shape[0])
            if hi <= lo:
                out.append(set())
                continue
            rms = float(np.sqrt(np.mean(channel[lo:hi] ** 2)))
            level = 20 * np.log10(rms) if rms > 0 else -np.inf
            out.append({segment.class_id} if level > self.threshold_dbfs else set())
        return out


class PredictionsDetector(Detector):
    """Frame-level class sets exported by an external SELD model, rows clip_id,frame_index,class_id."""

    name = "predictions"

    def __init__(self, path: Path) -> None:
        self.path = path
        self.table: Dict[Tuple[str, int], Set[int]] = {}
        if not path.is_file():
            raise FileNotFoundError(f"Predictions file not found: {path}")
        with path.open(newline="", encoding="utf-8") as handle:
            for lineno, row in enumerate(csv.reader(handle), start=1):
                if not row or all(not cell.strip() for cell in row):
                    continue
                if len(row) != 3:
                    raise MetadataError(path, lineno, f"expected clip_id,frame_index,class_id, got {row}")
                try:
                    frame, class_id = int(row[1]), int(row[2])
                except ValueError as exc:
                    if lineno == 1:
                        continue
                    raise MetadataError(path, lineno, f"non-integer frame or class in {row}") from exc
                self.table.setdefault((row[0].strip(), frame), set()).add(class_id)

    def detect(self, segment: EventSegment) -> List[Set[int]]:
        return [
            set(self.table.get((segment.source_clip, frame), set()))
            for frame in range(segment.frame_start, segment.frame_end)
        ]


def resolve_detector(spec: str, hop_s: float = 0.1) -> Detector:
    """Build a detector from 'accept-all', 'reject-all', 'energy[:dbfs]' or 'predictions:<path>'."""
    name, _, arg = spec.partition(":")
    if name == "accept-all":
        return AcceptAllDetector()
    if name == "reject-all":
        return RejectAllDetector()
    if name == "energy":
        try:
            threshold = float(arg) if arg else -50.0
        except ValueError as exc:
            raise ValueError(f"Bad energy detector threshold: {arg!r}") from exc
        return EnergyDetector(threshold, hop_s)
    if name == "predictions":
        if not arg:
            raise ValueError("predictions detector needs a path: predictions:<file>")
        return PredictionsDetector(Path(arg))
    raise ValueError(f"Unknown detector: {spec!r}")


def detection_fraction(segment: EventSegment, detector: Detector) -> float:
    try:
        frames = detector.detect(segment)
    except Exception as exc:
        raise DetectorError(segment.segment_id, exc) from exc
    if not frames:
        return 0.0
    return sum(segment.class_id in classes for classes in frames) / len(frames)


def detection_eliminate(
    segments: List[EventSegment],
    cfg: EliminationConfig,
    detector: Detector,
    jobs: Optional[int] = None,
    on_done: Optional[ProgressHook] = None,
) -> Tuple[List[EventSegment], List[EventSegment]]:
    width = jobs if detector.thread_safe else 1
    fractions = map_ordered(lambda s: detection_fraction(s, detector), segments, width, on_done)
    kept: List[EventSegment] = []
    eliminated: List[EventSegment] = []
    for segment, fraction in zip(segments, fractions):
        keep = fraction >= cfg.detect_keep_fraction
        segment.verdicts.detection_kept = keep
        (kept if keep else eliminated).append(segment)
    logger.info("Detection elimination: %d of %d removed", len(eliminated), len(segments))
    return kept, eliminated


def overlap_ratio(segment: EventSegment, cfg: EliminationConfig, stft_cfg: Optional[StftConfig] = None) -> float:
    """Share of focus-band bins whose normalized covariance has two or more eigenvalues above alpha."""
    stft_cfg = stft_cfg or StftConfig()
    frame_len, hop = stft_sizes(segment.sample_rate, stft_cfg.frame_ms, stft_cfg.hop_ms)
    if segment.audio.shape[-1] < frame_len:
        raise ValueError(f"Segment {segment.segment_id} is shorter than one STFT frame.")
    spec = stft(segment.audio, frame_len, hop, segment.sample_rate)
    if spec.num_frames < cfg.min_stft_frames:
        raise ValueError(
            f"Segment {segment.segment_id} has {spec.num_frames} STFT frames, needs {cfg.min_stft_frames}."
        )
    freqs = spec.bin_frequencies()
    focus = (freqs >= cfg.f_min) & (freqs <= cfg.f_max)
    cov = spatial_covariance(spec).values[focus]
    gammas = normalized_eigenvalues(cov)
    overlapped = np.count_nonzero((gammas > cfg.alpha).sum(axis=-1) >= 2)
    return float(overlapped / max(int(np.count_nonzero(focus)), 1))


def eigenvalue_eliminate(
    segments: List[EventSegment],
    cfg: EliminationConfig,
    stft_cfg: Optional[StftConfig] = None,
    jobs: Optional[int] = None,
    on_done: Optional[ProgressHook] = None,
) -> Tuple[List[EventSegment], List[EventSegment]]:
    ratios = map_ordered(lambda s: overlap_ratio(s, cfg, stft_cfg), segments, jobs, on_done)
    kept: List[EventSegment] = []
    eliminated: List[EventSegment] = []
    for segment, ratio in zip(segments, ratios):
        segment.overlap_ratio = ratio
        keep = ratio <= cfg.beta
        segment.verdicts.eigen_kept = keep
        (kept if keep else eliminated).append(segment)
    logger.info("Eigenvalue elimination: %d of %d removed", len(eliminated), len(segments))
    return kept, eliminated


@dataclass
class VerdictRow:
    segment_id: str
    class_id: int
    detection_kept: Optional[bool]
    eigen_kept: Optional[bool]
    overlap_ratio: Optional[float]

    @property
    def kept(self) -> bool:
        return self.detection_kept is not False and self.eigen_kept is not False


@dataclass
class EliminationReport:
    extracted: int = 0
    detection_eliminated: int = 0
    eigen_eliminated: int = 0
    rows: List[VerdictRow] = field(default_factory=list)

    @property
    def kept(self) -> int:
        return self.extracted - self.detection_eliminated - self.eigen_eliminated

    def kept_ids(self) -> List[str]:
        return [row.segment_id for row in self.rows if row.kept]


def run_elimination(
    segments: List[EventSegment],
    cfg: EliminationConfig,
    stft_cfg: Optional[StftConfig] = None,
    detector: Optional[Detector] = None,
    jobs: Optional[int] = None,
    on_done: Optional[ProgressHook] = None,
) -> Tuple[List[EventSegment], EliminationReport]:
    """Detection-based stage, then eigenvalue-based stage on what survives."""
    survivors = list(segments)
    detection_out: List[EventSegment] = []
    eigen_out: List[EventSegment] = []
    if cfg.use_detection:
        survivors, detection_out = detection_eliminate(survivors, cfg, detector or resolve_detector(cfg.detector), jobs, on_done)
    if cfg.use_eigenvalue:
        survivors, eigen_out = eigenvalue_eliminate(survivors, cfg, stft_cfg, jobs, on_done)
    report = EliminationReport(
        extracted=len(segments),
        detection_eliminated=len(detection_out),
        eigen_eliminated=len(eigen_out),
        rows=[
            VerdictRow(s.segment_id, s.class_id, s.verdicts.detection_kept, s.verdicts.eigen_kept, s.overlap_ratio)
            for s in segments
        ],
    )
    return survivors, report


def _verdict(value: Optional[bool]) -> str:
    if value is None:
        return "-"
    return "kept" if value else "eliminated"


def format_report(report: EliminationReport) -> str:
    lines = [
        f"extracted: {report.extracted}",
        f"detection-eliminated: {report.detection_eliminated}",
        f"eigenvalue-eliminated: {report.eigen_eliminated}",
        f"kept: {report.kept}",
        "",
        f"{'segment':<32} {'detection':<11} {'eigenvalue':<11} overlap_ratio",
    ]
    for row in report.rows:
        ratio = "-" if row.overlap_ratio is None else f"{row.overlap_ratio:.3f}"
        lines.append(f"{row.segment_id:<32} {_verdict(row.detection_kept):<11} {_verdict(row.eigen_kept):<11} {ratio}")
    return "\n".join(lines) + "\n"


VERDICT_HEADER = ["segment_id", "class_id", "detection", "eigenvalue", "overlap_ratio"]


def write_verdicts(report: EliminationReport, out_dir: Path) -> None:
    rows = [
        [
            row.segment_id,
            row.class_id,
            _verdict(row.detection_kept),
            _verdict(row.eigen_kept),
            "" if row.overlap_ratio is None else f"{row.overlap_ratio:.6f}",
        ]
        for row in report.rows
    ]
    write_rows(out_dir / "verdicts.csv", VERDICT_HEADER, rows)
    (out_dir / "report.txt").write_text(format_report(report), encoding="utf-8")


def read_verdicts(out_dir: Path) -> EliminationReport:
    parse = {"-": None, "kept": True, "eliminated": False}
    report = EliminationReport()
    for record in read_rows(out_dir / "verdicts.csv", VERDICT_HEADER):
        row = VerdictRow(
            segment_id=record["segment_id"],
            class_id=int(record["class_id"]),
            detection_kept=parse[record["detection"]],
            eigen_kept=parse[record["eigenvalue"]],
            overlap_ratio=float(record["overlap_ratio"]) if record["overlap_ratio"] else None,
        )
        report.rows.append(row)
        report.extracted += 1
        report.detection_eliminated += row.detection_kept is False
        report.eigen_eliminated += row.eigen_kept is False
    return report
