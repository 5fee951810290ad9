from __future__ import annotations

import hashlib
import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import types
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from core.types import AbsorptionModel, FoaConvention, FoldSpec


@dataclass
class PathsConfig:
    dataset_audio: str = ""
    dataset_metadata: str = ""
    work_dir: str = "work"
    output_dir: str = "irs_folds"
    array_file: str = ""

    @property
    def rir_bank(self) -> Path:
        return Path(self.work_dir) / "rirs"

    @property
    def segment_bank(self) -> Path:
        return Path(self.work_dir) / "segments"

    @property
    def elimination_dir(self) -> Path:
        return Path(self.work_dir) / "eliminated"

    @property
    def source_bank(self) -> Path:
        return Path(self.work_dir) / "sources"


@dataclass
class StftConfig:
    frame_ms: float = 20.0
    hop_ms: float = 10.0


@dataclass
class EncodingConfig:
    order: int = 1
    reg_max_gain_db: float = 20.0
    trunc_order: Optional[int] = None
    convention: FoaConvention = FoaConvention.SN3D_ACN


@dataclass
class RoomSamplingConfig:
    rt60_range: Tuple[float, float] = (0.1, 0.5)
    length_range: Tuple[float, float] = (4.0, 12.0)
    width_range: Tuple[float, float] = (4.0, 12.0)
    height_range: Tuple[float, float] = (2.5, 5.0)
    distance_range: Tuple[float, float] = (1.0, 3.0)
    wall_margin: float = 0.5
    speed_of_sound: float = 343.0
    absorption_model: AbsorptionModel = AbsorptionModel.IMAGE
    calibrate_rt60: bool = True
    rooms: int = 10
    rirs_per_room: int = 36
    exact_order: int = 2
    max_order: Optional[int] = None
    min_gain: float = 1e-4
    onset_guard: int = 16
    length_factor: float = 1.2


@dataclass
class ExtractionConfig:
    staticity_tol_deg: float = 10.0
    min_frames: int = 3
    guard_frames: int = 1
    label_hop_s: float = 0.1
    clip_glob: str = "fold[1234]_*"


@dataclass
class EliminationConfig:
    alpha: float = 0.3
    beta: float = 0.4
    f_min: float = 100.0
    f_max: float = 4000.0
    detector: str = "energy"
    detect_keep_fraction: float = 0.5
    min_stft_frames: int = 3
    use_detection: bool = True
    use_eigenvalue: bool = True


@dataclass
class EnhancementConfig:
    iters: int = 10
    ref_channel: int = 0
    noise_init_ms: float = 100.0
    peak_fraction: float = 0.25
    loading: float = 1e-3


@dataclass
class FoldsConfig:
    count: int = 2
    first_fold_id: int = 7
    clips_per_fold: int = 100
    clip_duration: float = 60.0
    event_count_range: Tuple[int, int] = (20, 30)
    polyphony_cap: int = 3
    single_room_per_clip: bool = True

    def fold_spec(self, index: int) -> FoldSpec:
        return FoldSpec(
            fold_id=self.first_fold_id + index,
            clip_count=self.clips_per_fold,
            clip_duration=self.clip_duration,
            event_count_range=self.event_count_range,
            polyphony_cap=self.polyphony_cap,
        )


@dataclass
class RenderConfig:
    gain_db_range: Tuple[float, float] = (-6.0, 6.0)
    noise_enabled: bool = True
    snr_range: Tuple[float, float] = (6.0, 30.0)
    first_order_noise_db: float = -3.0
    headroom_db: float = 1.0
    label_hop_s: float = 0.1
    max_attempts: int = 1000


@dataclass
class PipelineConfig:
    sample_rate: int = 24000
    master_seed: int = 0
    jobs: Optional[int] = None
    paths: PathsConfig = field(default_factory=PathsConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    rooms: RoomSamplingConfig = field(default_factory=RoomSamplingConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    elimination: EliminationConfig = field(default_factory=EliminationConfig)
    enhancement: EnhancementConfig = field(default_factory=EnhancementConfig)
    folds: FoldsConfig = field(default_factory=FoldsConfig)
    render: RenderConfig = field(default_factory=RenderConfig)


def validate_config(cfg: PipelineConfig) -> None:
    low, high = cfg.rooms.rt60_range
    if not 0.05 <= low <= high <= 2.0:
        raise ValueError(f"rooms.rt60_range must lie within [0.05, 2.0] s, got {cfg.rooms.rt60_range}")
    el = cfg.elimination
    if not 0 < el.alpha < 1 or not 0 < el.beta < 1:
        raise ValueError(f"elimination.alpha and beta must be in (0, 1), got {el.alpha}, {el.beta}")
    if not 0 <= el.f_min < el.f_max <= cfg.sample_rate / 2:
        raise ValueError(f"Need f_min < f_max <= Nyquist, got {el.f_min}, {el.f_max}")
    if not 0 < el.detect_keep_fraction <= 1:
        raise ValueError(f"detect_keep_fraction must be in (0, 1], got {el.detect_keep_fraction}")
    if cfg.stft.hop_ms > cfg.stft.frame_ms:
        raise ValueError("stft.hop_ms must not exceed stft.frame_ms")
    if not math.isfinite(cfg.encoding.reg_max_gain_db):
        raise ValueError("encoding.reg_max_gain_db must be finite")
    trunc = cfg.encoding.trunc_order
    if trunc is not None and trunc < cfg.encoding.order:
        raise ValueError(f"encoding.trunc_order {trunc} is below encoding.order {cfg.encoding.order}")
    if cfg.folds.count < 0 or cfg.folds.clips_per_fold < 1:
        raise ValueError("folds.count must be >= 0 and folds.clips_per_fold >= 1")


def validate_paths(cfg: PipelineConfig, needs_dataset: bool = False) -> None:
    if cfg.paths.array_file and not Path(cfg.paths.array_file).is_file():
        raise FileNotFoundError(f"Array geometry file not found: {cfg.paths.array_file}")
    if needs_dataset:
        for name in ("dataset_audio", "dataset_metadata"):
            value = getattr(cfg.paths, name)
            if not value or not Path(value).is_dir():
                raise FileNotFoundError(f"paths.{name} is not a directory: {value!r}")


def config_to_dict(cfg: PipelineConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def save_config(cfg: PipelineConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_dict(cfg), indent=2), encoding="utf-8")


def load_config(path: Path) -> PipelineConfig:
    if not path.is_file():
        raise FileNotFoundError(f"Config file not found: {path}")
    if path.suffix.lower() == ".toml":
        payload = tomllib.loads(path.read_text(encoding="utf-8"))
    elif path.suffix.lower() == ".json":
        payload = json.loads(path.read_text(encoding="utf-8"))
    else:
        raise ValueError("config file must be .json or .toml")
    cfg = config_from_dict(payload)
    validate_config(cfg)
    return cfg


def config_from_dict(payload: dict) -> PipelineConfig:
    return _from_dict(PipelineConfig, payload, "")


def config_digest(section: Any) -> str:
    payload = asdict(section) if is_dataclass(section) else section
    text = json.dumps(json.loads(json.dumps(payload)), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _from_dict(cls: type, payload: Any, prefix: str) -> Any:
    if not isinstance(payload, dict):
        raise ValueError(f"Config section {prefix or '<root>'} must be a table, got {type(payload).__name__}")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in payload:
        if key not in known:
            raise ValueError(f"Unknown config key: {prefix}{key}")
    kwargs = {}
    for f in fields(cls):
        if f.name in payload:
            kwargs[f.name] = _coerce(hints[f.name], payload[f.name], f"{prefix}{f.name}")
    return cls(**kwargs)


def _coerce(tp: Any, value: Any, key: str) -> Any:
    if is_dataclass(tp):
        return _from_dict(tp, value, f"{key}.")
    origin = get_origin(tp)
    if origin in (Union, types.UnionType):
        if value is None:
            return None
        inner = [arg for arg in get_args(tp) if arg is not type(None)]
        return _coerce(inner[0], value, key)
    if origin is tuple:
        args = get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{key}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], item, key) for item in value)
        if len(value) != len(args):
            raise ValueError(f"{key}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(arg, item, key) for arg, item in zip(args, value, strict=True))
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError as exc:
            raise ValueError(f"{key}: {value!r} is not one of {[e.value for e in tp]}") from exc
    if tp is bool:
        if not isinstance(value, bool):
            raise ValueError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ValueError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ValueError(f"{key}: expected a string, got {value!r}")
        return value
    return value
