from __future__ import annotations

import math
import os
from pathlib import Path
from typing import List, Tuple

import numpy as np
import pytest

from core.array import default_array
from core.config import PipelineConfig, RoomSamplingConfig
from core.io import emit_metadata, write_wav
from core.types import ArraySpec, LabelFrame, SphDirection


def foa_plane_wave(signal: np.ndarray, azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    """SN3D/ACN first-order signal [W, Y, Z, X] of a far-field source."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    gains = np.array([1.0, math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])
    return gains[:, None] * np.asarray(signal, dtype=float)[None, :]


def octahedron_array(radius: float = 0.042, sample_rate: int = 24000) -> ArraySpec:
    dirs = (
        SphDirection.from_degrees(0, 0),
        SphDirection.from_degrees(180, 0),
        SphDirection.from_degrees(90, 0),
        SphDirection.from_degrees(-90, 0),
        SphDirection.from_degrees(0, 90),
        SphDirection.from_degrees(0, -90),
    )
    return ArraySpec(radius=radius, mic_dirs=dirs, sample_rate=sample_rate, name="octahedron")


def write_tiny_dataset(root: Path, sample_rate: int = 24000) -> Tuple[Path, Path]:
    """One 6 s FOA clip holding two static, non-overlapping events."""
    audio_dir = root / "foa_dev" / "dev-train"
    meta_dir = root / "metadata_dev" / "dev-train"
    rng = np.random.default_rng(99)
    hop = sample_rate // 10
    audio = 1e-3 * rng.standard_normal((4, 6 * sample_rate))
    rows: List[LabelFrame] = []
    for class_id, (first, last), (azimuth, elevation) in ((1, (5, 25), (60, 0)), (2, (35, 55), (-120, 20))):
        span = slice(first * hop, last * hop)
        audio[:, span] += foa_plane_wave(0.3 * rng.standard_normal(span.stop - span.start), azimuth, elevation)
        rows.extend(LabelFrame(f, class_id, 0, azimuth, elevation) for f in range(first, last))
    write_wav(audio_dir / "fold1_room1_mix001.wav", audio, sample_rate)
    emit_metadata(meta_dir / "fold1_room1_mix001.csv", rows)
    return root / "foa_dev", root / "metadata_dev"


def fast_config(tmp_path: Path) -> PipelineConfig:
    """Small rooms, two RIRs and one short fold."""
    cfg = PipelineConfig(master_seed=5, jobs=2)
    cfg.paths.work_dir = str(tmp_path / "work")
    cfg.paths.output_dir = str(tmp_path / "out")
    cfg.rooms = RoomSamplingConfig(
        rt60_range=(0.15, 0.2),
        length_range=(4.0, 5.0),
        width_range=(4.0, 5.0),
        height_range=(2.5, 3.0),
        distance_range=(1.0, 1.5),
        rooms=1,
        rirs_per_room=2,
    )
    cfg.folds.count = 1
    cfg.folds.clips_per_fold = 2
    cfg.folds.clip_duration = 3.0
    cfg.folds.event_count_range = (1, 2)
    return cfg


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def em32() -> ArraySpec:
    return default_array()


@pytest.fixture
def octahedron() -> ArraySpec:
    return octahedron_array()


@pytest.fixture
def dataset_root() -> Path:
    root = os.environ.get("IRS_DATASET_ROOT")
    if not root or not Path(root).is_dir():
        pytest.skip("IRS_DATASET_ROOT not set; real-dataset checks skipped")
    return Path(root)
