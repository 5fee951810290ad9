from __future__ import annotations

import logging
import threading
from pathlib import Path
from typing import Dict, Generic, Iterator, List, Optional, TypeVar

import numpy as np
import soundfile as sf

from core.io import file_sha256, load_json, read_rows, read_wav, save_json, write_rows, write_wav
from core.types import (
    EnhancedSource,
    EventSegment,
    Placement,
    RirEntry,
    RoomSpec,
    ShIR,
    SourceEntry,
    SphDirection,
    wrap_degrees,
)

logger = logging.getLogger(__name__)

RIR_HEADER = ["id", "room_id", "lx", "ly", "lz", "rt60", "azimuth", "elevation", "distance"]
SEGMENT_HEADER = ["id", "clip", "class_id", "start", "end", "frame_start", "frame_end", "azimuth", "elevation"]
SOURCE_HEADER = ["id", "class_id", "provenance", "rms"]
INDEX_FILE = "index.csv"
MANIFEST_FILE = "manifest.json"

E = TypeVar("E")


class BankManifest:
    """Per-bank record of entry id -> sha256 of the written file, tied to a config digest.

    A digest mismatch invalidates every entry so a changed configuration
    recomputes the whole bank.
    """

    def __init__(self, root: Path, digest: str) -> None:
        self.path = root / MANIFEST_FILE
        self.digest = digest
        stored = load_json(self.path)
        if stored and stored.get("config_digest") != digest:
            logger.info("Config changed for %s; rebuilding", root)
            stored = {}
        self.entries: Dict[str, str] = dict(stored.get("entries", {}))
        self._lock = threading.Lock()

    def is_current(self, entry_id: str, path: Path) -> bool:
        expected = self.entries.get(entry_id)
        return expected is not None and path.is_file() and file_sha256(path) == expected

    def record(self, entry_id: str, path: Path) -> None:
        digest = file_sha256(path)
        with self._lock:
            self.entries[entry_id] = digest

    def save(self) -> None:
        save_json({"config_digest": self.digest, "entries": dict(sorted(self.entries.items()))}, self.path)


def bank_hash(root: Path) -> str:
    """Content hash of a bank: its index file."""
    index = root / INDEX_FILE
    if not index.is_file():
        raise FileNotFoundError(f"Bank index not found: {index}")
    return file_sha256(index)


class AudioBank(Generic[E]):
    """Entries plus their audio, read from a bank directory or held in memory."""

    kind = "bank"

    def __init__(self, entries: List[E], root: Optional[Path] = None, arrays: Optional[Dict[str, np.ndarray]] = None) -> None:
        if root is None and arrays is None:
            raise ValueError(f"{self.kind} needs a directory or in-memory audio")
        self.entries = list(entries)
        self.root = root
        self._arrays = arrays or {}
        self._by_id = {self.key(entry): entry for entry in self.entries}
        self._lengths: Dict[str, int] = {}
        if len(self._by_id) != len(self.entries):
            raise ValueError(f"Duplicate ids in {self.kind}")

    def key(self, entry: E) -> str:
        raise NotImplementedError

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, entry_id: str) -> E:
        try:
            return self._by_id[entry_id]
        except KeyError:
            raise KeyError(f"Unknown {self.kind} id: {entry_id}") from None

    def path(self, entry_id: str) -> Path:
        if self.root is None:
            raise ValueError(f"{self.kind} is held in memory")
        return self.root / f"{entry_id}.wav"

    def audio(self, entry_id: str) -> np.ndarray:
        self.get(entry_id)
        if entry_id in self._arrays:
            return self._arrays[entry_id]
        audio, _ = read_wav(self.path(entry_id))
        return audio

    def length(self, entry_id: str) -> int:
        if entry_id not in self._lengths:
            if entry_id in self._arrays:
                self._lengths[entry_id] = int(self._arrays[entry_id].shape[-1])
            else:
                self.get(entry_id)
                self._lengths[entry_id] = int(sf.info(str(self.path(entry_id))).frames)
        return self._lengths[entry_id]


class RirBank(AudioBank[RirEntry]):
    kind = "RIR bank"

    def key(self, entry: RirEntry) -> str:
        return entry.rir_id

    def rooms(self) -> List[int]:
        return sorted({entry.room_id for entry in self.entries})

    def in_room(self, room_id: int) -> List[RirEntry]:
        return [entry for entry in self.entries if entry.room_id == room_id]

    @classmethod
    def load(cls, root: Path) -> RirBank:
        entries = [
            RirEntry(
                rir_id=row["id"],
                room_id=int(row["room_id"]),
                dims=(float(row["lx"]), float(row["ly"]), float(row["lz"])),
                rt60=float(row["rt60"]),
                azimuth_deg=wrap_degrees(float(row["azimuth"])),
                elevation_deg=float(row["elevation"]),
                distance=float(row["distance"]),
            )
            for row in read_rows(root / INDEX_FILE, RIR_HEADER)
        ]
        return cls(entries, root=root)


class SourceBank(AudioBank[SourceEntry]):
    kind = "source bank"

    def key(self, entry: SourceEntry) -> str:
        return entry.source_id

    def audio(self, entry_id: str) -> np.ndarray:
        return np.atleast_2d(super().audio(entry_id))[0]

    def class_median_rms(self) -> Dict[int, float]:
        by_class: Dict[int, List[float]] = {}
        for entry in self.entries:
            by_class.setdefault(entry.class_id, []).append(entry.rms)
        return {class_id: float(np.median(values)) for class_id, values in sorted(by_class.items())}

    @classmethod
    def load(cls, root: Path) -> SourceBank:
        entries = [
            SourceEntry(source_id=row["id"], class_id=int(row["class_id"]), provenance=row["provenance"], rms=float(row["rms"]))
            for row in read_rows(root / INDEX_FILE, SOURCE_HEADER)
        ]
        return cls(entries, root=root)


def rir_entry(rir_id: str, room_id: int, room: RoomSpec, placement: Placement) -> RirEntry:
    azimuth, elevation = placement.source_direction().degrees
    return RirEntry(
        rir_id=rir_id,
        room_id=room_id,
        dims=room.dims,
        rt60=room.rt60,
        azimuth_deg=azimuth,
        elevation_deg=elevation,
        distance=placement.distance,
    )


def write_rir(root: Path, rir_id: str, ir: ShIR) -> Path:
    path = root / f"{rir_id}.wav"
    write_wav(path, ir.channels, ir.sample_rate)
    return path


def write_rir_index(root: Path, entries: List[RirEntry]) -> None:
    rows = [
        [e.rir_id, e.room_id, f"{e.dims[0]:.4f}", f"{e.dims[1]:.4f}", f"{e.dims[2]:.4f}", f"{e.rt60:.4f}",
         f"{e.azimuth_deg:.4f}", f"{e.elevation_deg:.4f}", f"{e.distance:.4f}"]
        for e in sorted(entries, key=lambda e: e.rir_id)
    ]
    write_rows(root / INDEX_FILE, RIR_HEADER, rows)


def write_segment(root: Path, segment: EventSegment) -> Path:
    path = root / f"{segment.segment_id}.wav"
    write_wav(path, segment.audio, segment.sample_rate)
    return path


def write_segment_index(root: Path, segments: List[EventSegment]) -> None:
    rows = []
    for s in sorted(segments, key=lambda s: s.segment_id):
        azimuth, elevation = s.doa.degrees
        rows.append([s.segment_id, s.source_clip, s.class_id, s.start, s.end, s.frame_start, s.frame_end,
                     f"{azimuth:.6f}", f"{elevation:.6f}"])
    write_rows(root / INDEX_FILE, SEGMENT_HEADER, rows)


def iter_segments(root: Path, ids: Optional[List[str]] = None) -> Iterator[EventSegment]:
    """Segments of a bank in index order, optionally limited to the given ids."""
    wanted = set(ids) if ids is not None else None
    for row in read_rows(root / INDEX_FILE, SEGMENT_HEADER):
        segment_id = row["id"]
        if wanted is not None and segment_id not in wanted:
            continue
        audio, sample_rate = read_wav(root / f"{segment_id}.wav")
        clip = row["clip"]
        prefix = f"{clip}_seg"
        if not segment_id.startswith(prefix):
            raise ValueError(f"Segment id {segment_id} does not belong to clip {clip}")
        yield EventSegment(
            audio=audio,
            class_id=int(row["class_id"]),
            doa=SphDirection.from_degrees(float(row["azimuth"]), float(row["elevation"])),
            source_clip=clip,
            start=int(row["start"]),
            end=int(row["end"]),
            frame_start=int(row["frame_start"]),
            frame_end=int(row["frame_end"]),
            index=int(segment_id[len(prefix):]),
            sample_rate=sample_rate,
        )


def source_entry(source: EnhancedSource) -> SourceEntry:
    return SourceEntry(source_id=source.provenance, class_id=source.class_id, provenance=source.provenance, rms=source.rms)


def write_source(root: Path, source: EnhancedSource) -> Path:
    path = root / f"{source.provenance}.wav"
    write_wav(path, source.audio[None, :], source.sample_rate)
    return path


def write_source_index(root: Path, entries: List[SourceEntry]) -> None:
    rows = [[e.source_id, e.class_id, e.provenance, f"{e.rms:.9g}"] for e in sorted(entries, key=lambda e: e.source_id)]
    write_rows(root / INDEX_FILE, SOURCE_HEADER, rows)


def bank_summary(root: Path) -> Dict[str, object]:
    """Counts per class and value ranges for `inspect`."""
    index = root / INDEX_FILE
    if not index.is_file():
        return {"entries": 0}
    header = index.read_text(encoding="utf-8").splitlines()[0].split(",")
    rows = read_rows(index, header)
    summary: Dict[str, object] = {"entries": len(rows)}
    if "class_id" in header:
        counts: Dict[str, int] = {}
        for row in rows:
            counts[row["class_id"]] = counts.get(row["class_id"], 0) + 1
        summary["per_class"] = dict(sorted(counts.items(), key=lambda item: int(item[0])))
    if "rt60" in header and rows:
        rt60 = np.array([float(row["rt60"]) for row in rows])
        summary["rt60"] = {"min": float(rt60.min()), "median": float(np.median(rt60)), "max": float(rt60.max())}
        summary["rooms"] = len({row["room_id"] for row in rows})
    if "azimuth" in header and rows:
        azimuth = np.array([float(row["azimuth"]) for row in rows])
        elevation = np.array([float(row["elevation"]) for row in rows])
        quadrants = np.histogram(azimuth, bins=[-180, -90, 0, 90, 180])[0]
        summary["azimuth_quadrants"] = [int(v) for v in quadrants]
        summary["elevation_range"] = [float(elevation.min()), float(elevation.max())]
    return summary
