from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import soundfile as sf
from scipy.io import wavfile

from core.types import LabelFrame

MAX_CHANNELS = 64
_PCM = 0x0001
_FLOAT = 0x0003
_EXTENSIBLE = 0xFFFE
_SUPPORTED = {(_PCM, 16), (_PCM, 24), (_FLOAT, 32)}


class WavFormatError(ValueError):
    def __init__(self, path: Path, offset: int, message: str) -> None:
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = path
        self.offset = offset


class MetadataError(ValueError):
    def __init__(self, path: Path, line: int, message: str) -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


def _walk_riff(path: Path) -> Tuple[int, int, int, int]:
    """Validate chunk layout; returns (format_tag, channels, sample_rate, bits)."""
    size = path.stat().st_size
    fmt: Optional[Tuple[int, int, int, int]] = None
    with path.open("rb") as handle:
        header = handle.read(12)
        if len(header) < 12:
            raise WavFormatError(path, len(header), "truncated RIFF header")
        if header[:4] != b"RIFF" or header[8:12] != b"WAVE":
            raise WavFormatError(path, 0, "not a RIFF/WAVE file")
        offset = 12
        while offset < size:
            chunk = handle.read(8)
            if len(chunk) < 8:
                raise WavFormatError(path, offset, "truncated chunk header")
            chunk_id, chunk_size = struct.unpack("<4sI", chunk)
            body_end = offset + 8 + chunk_size
            if body_end > size:
                raise WavFormatError(
                    path, offset, f"chunk {chunk_id!r} claims {chunk_size} bytes but the file ends at byte {size}"
                )
            if chunk_id == b"fmt ":
                if chunk_size < 16:
                    raise WavFormatError(path, offset, f"fmt chunk too short ({chunk_size} bytes)")
                body = handle.read(chunk_size)
                tag, channels, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
                if tag == _EXTENSIBLE:
                    if chunk_size < 40:
                        raise WavFormatError(path, offset, "extensible fmt chunk too short")
                    tag = struct.unpack("<H", body[24:26])[0]
                if (tag, bits) not in _SUPPORTED:
                    raise WavFormatError(path, offset, f"unsupported codec (format {tag:#06x}, {bits} bit)")
                if not 1 <= channels <= MAX_CHANNELS:
                    raise WavFormatError(path, offset, f"channel count {channels} outside 1..{MAX_CHANNELS}")
                fmt = (tag, channels, rate, bits)
            elif chunk_id == b"data":
                if fmt is None:
                    raise WavFormatError(path, offset, "data chunk before fmt chunk")
                return fmt
            else:
                handle.seek(chunk_size, 1)
            offset = body_end
            if chunk_size % 2:
                handle.seek(1, 1)
                offset += 1
    raise WavFormatError(path, size, "no data chunk")


def read_wav(path: Path, expected_channels: Optional[int] = None) -> Tuple[np.ndarray, int]:
    """Channels-first audio and sample rate; float32 files stay float32, PCM maps to [-1, 1)."""
    if not path.is_file():
        raise FileNotFoundError(f"Audio file not found: {path}")
    tag, channels, _, _ = _walk_riff(path)
    if expected_channels is not None and channels != expected_channels:
        raise WavFormatError(path, 12, f"expected {expected_channels} channels, found {channels}")
    dtype = "float32" if tag == _FLOAT else "float64"
    data, rate = sf.read(str(path), dtype=dtype, always_2d=True)
    return np.ascontiguousarray(data.T), int(rate)


def write_wav(path: Path, audio: np.ndarray, sample_rate: int, subtype: str = "FLOAT") -> None:
    data = np.atleast_2d(np.asarray(audio))
    if data.shape[0] > MAX_CHANNELS:
        raise ValueError(f"Refusing to write {data.shape[0]} channels (max {MAX_CHANNELS}).")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"Non-finite samples in audio for {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    if subtype == "FLOAT":
        # libsndfile stamps float files with a wall-clock PEAK chunk; scipy writes reproducible bytes.
        wavfile.write(str(path), int(sample_rate), np.ascontiguousarray(data.T.astype(np.float32)))
    elif subtype in ("PCM_16", "PCM_24"):
        sf.write(str(path), data.T, int(sample_rate), subtype=subtype)
    else:
        raise ValueError(f"Unsupported subtype: {subtype}")


def _parse_row(row: List[str]) -> LabelFrame:
    if len(row) != 5:
        raise ValueError(f"expected 5 fields frame,class,track,azimuth,elevation, got {len(row)}")
    try:
        frame, class_id, track, azimuth, elevation = (int(value.strip()) for value in row)
    except ValueError as exc:
        raise ValueError(f"non-integer field in {row}") from exc
    if azimuth == 180:
        azimuth = -180
    return LabelFrame(
        frame_index=frame,
        class_id=class_id,
        track_id=track,
        azimuth_deg=float(azimuth),
        elevation_deg=float(elevation),
    )


def parse_metadata(path: Path) -> List[LabelFrame]:
    if not path.is_file():
        raise FileNotFoundError(f"Metadata file not found: {path}")
    frames: List[LabelFrame] = []
    problems: List[Tuple[int, str]] = []
    with path.open(newline="", encoding="utf-8") as handle:
        for lineno, row in enumerate(csv.reader(handle), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                frames.append(_parse_row(row))
            except ValueError as exc:
                problems.append((lineno, str(exc)))
    if problems:
        detail = "; ".join(f"line {line}: {msg}" for line, msg in problems[:10])
        raise MetadataError(path, problems[0][0], f"{len(problems)} malformed row(s): {detail}")
    frames.sort(key=lambda f: (f.frame_index, f.track_id))
    return frames


def _degrees(value: float) -> int:
    rounded = int(round(value))
    return -180 if rounded == 180 else rounded


def emit_metadata(path: Path, frames: Iterable[LabelFrame]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(frames, key=lambda f: (f.frame_index, f.track_id))
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        for f in ordered:
            writer.writerow([f.frame_index, f.class_id, f.track_id, _degrees(f.azimuth_deg), _degrees(f.elevation_deg)])


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def save_json(payload: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    tmp.replace(path)


def load_json(path: Path) -> Dict[str, Any]:
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))


def write_rows(path: Path, header: List[str], rows: Iterable[List[Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_rows(path: Path, header: List[str]) -> List[Dict[str, str]]:
    if not path.is_file():
        raise FileNotFoundError(f"Index file not found: {path}")
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != header:
            raise MetadataError(path, 1, f"expected header {','.join(header)}, got {reader.fieldnames}")
        return list(reader)
