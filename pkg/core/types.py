from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np


class FoaConvention(str, Enum):
    SN3D_ACN = "sn3d_acn"
    N3D_ACN = "n3d_acn"
    ORTHONORMAL_ACN = "orthonormal_acn"
    COMPLEX = "complex"


class AbsorptionModel(str, Enum):
    SABINE = "sabine"
    EYRING = "eyring"
    IMAGE = "image"


@dataclass(frozen=True)
class SphDirection:
    """Direction in radians: azimuth in [-pi, pi), elevation in [-pi/2, pi/2]."""

    azimuth: float
    elevation: float

    def __post_init__(self) -> None:
        if not -math.pi <= self.azimuth < math.pi:
            raise ValueError(f"azimuth out of [-pi, pi): {self.azimuth}")
        if not -math.pi / 2 <= self.elevation <= math.pi / 2:
            raise ValueError(f"elevation out of [-pi/2, pi/2]: {self.elevation}")

    @classmethod
    def from_degrees(cls, azimuth_deg: float, elevation_deg: float) -> SphDirection:
        return cls(wrap_azimuth(math.radians(azimuth_deg)), math.radians(elevation_deg))

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> SphDirection:
        x, y, z = (float(v) for v in vector)
        norm = math.sqrt(x * x + y * y + z * z)
        if norm == 0.0:
            raise ValueError("Cannot take the direction of a zero vector.")
        elevation = math.asin(max(-1.0, min(1.0, z / norm)))
        return cls(wrap_azimuth(math.atan2(y, x)), elevation)

    def to_vector(self) -> np.ndarray:
        cos_el = math.cos(self.elevation)
        return np.array([cos_el * math.cos(self.azimuth), cos_el * math.sin(self.azimuth), math.sin(self.elevation)])

    @property
    def degrees(self) -> Tuple[float, float]:
        return math.degrees(self.azimuth), math.degrees(self.elevation)


def wrap_azimuth(azimuth: float) -> float:
    wrapped = (azimuth + math.pi) % (2 * math.pi) - math.pi
    return -math.pi if wrapped >= math.pi else wrapped


def wrap_degrees(azimuth_deg: float) -> float:
    wrapped = (azimuth_deg + 180.0) % 360.0 - 180.0
    return -180.0 if wrapped >= 180.0 else wrapped


def great_circle(a: SphDirection, b: SphDirection) -> float:
    """Angle in radians between two directions."""
    dot = float(np.dot(a.to_vector(), b.to_vector()))
    return math.acos(max(-1.0, min(1.0, dot)))


@dataclass(frozen=True)
class ArraySpec:
    radius: float
    mic_dirs: Tuple[SphDirection, ...]
    sample_rate: int = 24000
    name: str = "em32"

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError(f"Array radius must be positive, got {self.radius}.")
        if not self.mic_dirs:
            raise ValueError("Array needs at least one microphone.")
        vectors = np.array([d.to_vector() for d in self.mic_dirs])
        gram = vectors @ vectors.T - np.eye(len(vectors))
        if np.any(gram > 1.0 - 1e-12):
            raise ValueError("Microphone directions must be pairwise distinct.")

    @property
    def num_mics(self) -> int:
        return len(self.mic_dirs)

    @property
    def azimuths(self) -> np.ndarray:
        return np.array([d.azimuth for d in self.mic_dirs])

    @property
    def elevations(self) -> np.ndarray:
        return np.array([d.elevation for d in self.mic_dirs])

    @property
    def mic_vectors(self) -> np.ndarray:
        return np.array([d.to_vector() for d in self.mic_dirs])


@dataclass
class MicSpectrum:
    values: np.ndarray
    k: float

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError(f"Wave number must be non-negative, got {self.k}.")


@dataclass
class ShSpectrum:
    values: np.ndarray
    k: float

    @property
    def order(self) -> int:
        return int(round(math.sqrt(self.values.shape[0]))) - 1


@dataclass(frozen=True)
class RoomSpec:
    dims: Tuple[float, float, float]
    rt60: float
    speed_of_sound: float = 343.0

    def __post_init__(self) -> None:
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise ValueError(f"Room dims must be three positive lengths, got {self.dims}.")
        if not 0.05 <= self.rt60 <= 2.0:
            raise ValueError(f"rt60 must be within [0.05, 2.0] s, got {self.rt60}.")

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dims
        return 2.0 * (lx * ly + lx * lz + ly * lz)


@dataclass
class Placement:
    source_pos: np.ndarray
    array_pos: np.ndarray
    array_orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(np.asarray(self.source_pos) - np.asarray(self.array_pos)))

    def source_direction(self) -> SphDirection:
        """Source DOA in the array frame."""
        rel = np.asarray(self.array_orientation).T @ (np.asarray(self.source_pos) - np.asarray(self.array_pos))
        return SphDirection.from_vector(rel)


@dataclass
class ImageSource:
    position: np.ndarray
    order: int
    gain: float
    distance: float
    delay: float


@dataclass
class RirMetadata:
    room: RoomSpec
    placement: Placement
    seed: int
    doa: SphDirection
    distance: float


@dataclass
class ShIR:
    channels: np.ndarray
    sample_rate: int
    convention: FoaConvention
    metadata: Optional[RirMetadata] = None

    @property
    def length(self) -> int:
        return int(self.channels.shape[-1])


@dataclass
class Spectrogram:
    """values[channel, frame, bin]; length is the signal length it came from."""

    values: np.ndarray
    frame_len: int
    hop: int
    sample_rate: int
    length: int

    @property
    def num_channels(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_frames(self) -> int:
        return int(self.values.shape[1])

    @property
    def num_bins(self) -> int:
        return int(self.values.shape[2])

    def bin_frequencies(self) -> np.ndarray:
        return np.fft.rfftfreq(self.frame_len, d=1.0 / self.sample_rate)


@dataclass
class CovariancePerBin:
    values: np.ndarray
    frame_count: int


@dataclass(frozen=True)
class LabelFrame:
    frame_index: int
    class_id: int
    track_id: int
    azimuth_deg: float
    elevation_deg: float

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise ValueError(f"frame index must be non-negative, got {self.frame_index}")
        if not -180 <= self.azimuth_deg < 180:
            raise ValueError(f"azimuth out of [-180, 180): {self.azimuth_deg}")
        if not -90 <= self.elevation_deg <= 90:
            raise ValueError(f"elevation out of [-90, 90]: {self.elevation_deg}")

    @property
    def direction(self) -> SphDirection:
        return SphDirection.from_degrees(self.azimuth_deg, self.elevation_deg)


@dataclass
class Verdicts:
    label_ok: bool = True
    detection_kept: Optional[bool] = None
    eigen_kept: Optional[bool] = None

    @property
    def kept(self) -> bool:
        return self.label_ok and self.detection_kept is not False and self.eigen_kept is not False


@dataclass
class EventSegment:
    audio: np.ndarray
    class_id: int
    doa: SphDirection
    source_clip: str
    start: int
    end: int
    frame_start: int
    frame_end: int
    index: int = 0
    sample_rate: int = 24000
    verdicts: Verdicts = field(default_factory=Verdicts)
    overlap_ratio: Optional[float] = None

    def __post_init__(self) -> None:
        if self.end <= self.start:
            raise ValueError(f"Segment end {self.end} must follow start {self.start}.")

    @property
    def segment_id(self) -> str:
        return f"{self.source_clip}_seg{self.index:03d}"


@dataclass
class TfMasks:
    target: np.ndarray
    noise: np.ndarray


@dataclass
class EnhancedSource:
    audio: np.ndarray
    class_id: int
    provenance: str
    target_cov: np.ndarray
    noise_cov: np.ndarray
    weights: np.ndarray
    sample_rate: int = 24000

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.audio**2))) if self.audio.size else 0.0


@dataclass(frozen=True)
class SourceEntry:
    source_id: str
    class_id: int
    provenance: str
    rms: float


@dataclass(frozen=True)
class RirEntry:
    rir_id: str
    room_id: int
    dims: Tuple[float, float, float]
    rt60: float
    azimuth_deg: float
    elevation_deg: float
    distance: float


@dataclass(frozen=True)
class PlannedEvent:
    source_id: str
    rir_id: str
    onset: int
    gain_db: float


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float
    seed: int
    kind: str = "diffuse"


@dataclass
class MixturePlan:
    clip_id: str
    seed: int
    events: List[PlannedEvent]
    noise: Optional[NoiseSpec]
    duration: int
    room_id: int = 0


@dataclass(frozen=True)
class FoldSpec:
    fold_id: int
    clip_count: int
    clip_duration: float = 60.0
    event_count_range: Tuple[int, int] = (20, 30)
    polyphony_cap: int = 3

    def __post_init__(self) -> None:
        if self.clip_count < 1:
            raise ValueError(f"clip_count must be at least 1, got {self.clip_count}.")
        if self.polyphony_cap < 1:
            raise ValueError(f"polyphony_cap must be at least 1, got {self.polyphony_cap}.")
        low, high = self.event_count_range
        if low < 0 or high < low:
            raise ValueError(f"Bad event_count_range {self.event_count_range}.")


@dataclass
class RenderedClip:
    audio: np.ndarray
    labels: List[LabelFrame]
    trim_db: float = 0.0
    placed_events: int = 0

