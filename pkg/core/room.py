from __future__ import annotations

import logging
import math
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from core.array import auto_trunc, convert_sh, encode_sh_bins, radial_fn
from core.config import EncodingConfig, RoomSamplingConfig
from core.special import legendre_series
from core.types import (
    AbsorptionModel,
    ArraySpec,
    FoaConvention,
    ImageSource,
    Placement,
    RirMetadata,
    RoomSpec,
    ShIR,
)

logger = logging.getLogger(__name__)

SABINE_CONSTANT = 0.161
MAX_ABSORPTION = 0.99
MAX_ORDER_CAP = 40
MIN_IMAGE_DISTANCE = 0.1
MIN_SOURCE_DISTANCE = 0.3
TAPER_START = 0.9
LATE_OVERSAMPLE = 8
CALIBRATION_GRID = 40


def rt60_to_absorption(room: RoomSpec, model: AbsorptionModel = AbsorptionModel.SABINE) -> float:
    """Uniform wall absorption that yields room.rt60 under the chosen decay model."""
    if model == AbsorptionModel.SABINE:
        alpha = SABINE_CONSTANT * room.volume / (room.surface * room.rt60)
    elif model == AbsorptionModel.EYRING:
        alpha = 1.0 - math.exp(-SABINE_CONSTANT * room.volume / (room.surface * room.rt60))
    elif model == AbsorptionModel.IMAGE:
        constant = _image_decay_constant(tuple(float(d) for d in room.dims), float(room.speed_of_sound))
        alpha = 1.0 - math.exp(-constant / room.rt60)
    else:
        raise ValueError(f"Unknown absorption model: {model}")
    if alpha > MAX_ABSORPTION:
        raise ValueError(
            f"Room {room.dims} cannot reach rt60={room.rt60}s: absorption {alpha:.3f} exceeds {MAX_ABSORPTION}"
        )
    return alpha


def _sphere_points(count: int) -> np.ndarray:
    index = np.arange(count) + 0.5
    z = 1.0 - 2.0 * index / count
    phi = math.pi * (1.0 + math.sqrt(5.0)) * index
    rho = np.sqrt(1.0 - z**2)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


@lru_cache(maxsize=256)
def _image_decay_constant(dims: Tuple[float, float, float], speed_of_sound: float) -> float:
    """T60 * (-ln(1 - alpha)) for the image lattice of a shoebox.

    Image energy arriving from direction u decays with (1 - alpha)^(c t f(u)),
    f(u) = sum |u_i| / L_i. The Schroeder curve of that directional mixture is
    fitted over -5..-35 dB exactly like estimate_t60 does on a simulated RIR.
    """
    rates = speed_of_sound * (np.abs(_sphere_points(2000)) @ (1.0 / np.asarray(dims)))
    t = np.linspace(0.0, 9.3 / rates.min(), 1500)
    weights = 1.0 / rates
    tail = (np.exp(-np.outer(t, rates)) * weights).mean(axis=1) / weights.mean()
    level = 10 * np.log10(np.maximum(tail, 1e-300))
    fit = (level <= -5.0) & (level >= -35.0)
    slope = np.polyfit(t[fit], level[fit], 1)[0]
    return -60.0 / slope


def default_max_order(alpha: float, cap: int = MAX_ORDER_CAP) -> int:
    """Smallest reflection order whose residual energy (1 - alpha)^n is below -60 dB."""
    if alpha >= 1.0:
        return 0
    if alpha <= 0.0:
        return cap
    return min(int(math.ceil(math.log(1e-6) / math.log(1.0 - alpha))), cap)


def check_placement(room: RoomSpec, placement: Placement, min_distance: float = MIN_SOURCE_DISTANCE) -> None:
    dims = np.asarray(room.dims, dtype=float)
    for name in ("source_pos", "array_pos"):
        pos = np.asarray(getattr(placement, name), dtype=float)
        if pos.shape != (3,) or np.any(pos <= 0) or np.any(pos >= dims):
            raise ValueError(f"Placement {name} {pos.tolist()} is not strictly inside room {room.dims}")
    if placement.distance < min_distance:
        raise ValueError(f"Source-array distance {placement.distance:.3f} m is below {min_distance} m")


def image_arrays(
    room: RoomSpec,
    placement: Placement,
    alpha: float,
    max_order: int,
    min_gain: float,
    max_distance: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Mirror images as arrays (positions, orders, gains, distances), sorted by distance."""
    if max_order < 0:
        raise ValueError(f"max_order must be non-negative, got {max_order}")
    dims = np.asarray(room.dims, dtype=float)
    src = np.asarray(placement.source_pos, dtype=float)
    center = np.asarray(placement.array_pos, dtype=float)
    reach = [max_order // 2 + 1] * 3
    if max_distance is not None:
        reach = [min(reach[i], int(math.ceil(max_distance / (2 * dims[i]))) + 1) for i in range(3)]
    axes = [np.arange(-reach[i], reach[i] + 1) for i in range(3)]
    rx, ry, rz = np.meshgrid(*axes, indexing="ij")
    lattice = np.stack([rx.ravel(), ry.ravel(), rz.ravel()], axis=1)
    reflection = math.sqrt(1.0 - alpha)
    positions, orders = [], []
    for p in np.ndindex(2, 2, 2):
        parity = np.asarray(p)
        pos = (1 - 2 * parity) * src + 2 * lattice * dims
        order = (np.abs(lattice - parity) + np.abs(lattice)).sum(axis=1)
        positions.append(pos)
        orders.append(order)
    positions = np.concatenate(positions)
    orders = np.concatenate(orders)
    gains = reflection**orders
    distances = np.linalg.norm(positions - center, axis=1)
    keep = (orders <= max_order) & (gains >= min_gain)
    if max_distance is not None:
        keep &= distances <= max_distance
    positions, orders, gains, distances = positions[keep], orders[keep], gains[keep], distances[keep]
    sort = np.lexsort((orders, distances))
    return positions[sort], orders[sort], gains[sort], distances[sort]


def enumerate_image_sources(
    room: RoomSpec,
    placement: Placement,
    max_order: int,
    min_gain: float = 1e-4,
    model: AbsorptionModel = AbsorptionModel.IMAGE,
    max_distance: Optional[float] = None,
) -> List[ImageSource]:
    alpha = rt60_to_absorption(room, model)
    positions, orders, gains, distances = image_arrays(room, placement, alpha, max_order, min_gain, max_distance)
    return [
        ImageSource(
            position=positions[i],
            order=int(orders[i]),
            gain=float(gains[i]),
            distance=float(distances[i]),
            delay=float(distances[i] / room.speed_of_sound),
        )
        for i in range(len(orders))
    ]


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def rir_length(rt60: float, sample_rate: int, factor: float = 1.2) -> int:
    return int(math.ceil(factor * rt60 * sample_rate))


def _check_length(room: RoomSpec, sample_rate: int, length_samples: int) -> None:
    minimum = rir_length(room.rt60, sample_rate)
    if length_samples < minimum:
        raise ValueError(f"length_samples={length_samples} must cover 1.2 x rt60 ({minimum} samples)")


def _modal_weights(k: np.ndarray, radius: float, trunc: int) -> np.ndarray:
    """i^n (2n + 1) conj(b_n(kR)) per bin and order, shape (bins, trunc + 1)."""
    kr = k * radius
    out = np.empty((k.shape[0], trunc + 1), dtype=complex)
    for n in range(trunc + 1):
        out[:, n] = (1j**n) * (2 * n + 1) * np.conj(radial_fn(n, kr))
    return out


def mic_spectra(
    room: RoomSpec,
    placement: Placement,
    array: ArraySpec,
    nfft: int,
    length_samples: int,
    cfg: Optional[RoomSamplingConfig] = None,
    trunc: Optional[int] = None,
) -> np.ndarray:
    """Per-microphone one-sided spectra (mics, nfft // 2 + 1) of the room response.

    Images up to cfg.exact_order get exact fractional delays; later ones are
    rounded to 1/LATE_OVERSAMPLE of a sample. trunc fixes the modal series
    order, None picks it from kR at Nyquist.
    """
    cfg = cfg or RoomSamplingConfig(speed_of_sound=room.speed_of_sound)
    check_placement(room, placement)
    fs = array.sample_rate
    c = room.speed_of_sound
    if cfg.calibrate_rt60 and cfg.max_order is None:
        alpha = calibrate_absorption(room, placement, fs, length_samples, cfg)
    else:
        alpha = rt60_to_absorption(room, cfg.absorption_model)
    max_order = default_max_order(alpha) if cfg.max_order is None else cfg.max_order
    max_distance = length_samples * c / fs
    positions, orders, gains, distances = image_arrays(room, placement, alpha, max_order, cfg.min_gain, max_distance)
    if len(distances) and distances.min() < MIN_IMAGE_DISTANCE:
        raise ValueError(f"Image source {distances.min():.3f} m from the array center, below {MIN_IMAGE_DISTANCE} m")
    logger.debug("Room %s alpha=%.3f: %d images up to order %d", room.dims, alpha, len(orders), max_order)

    freqs = np.fft.rfftfreq(nfft, d=1.0 / fs)
    k = 2 * np.pi * freqs / c
    if trunc is None:
        trunc = auto_trunc(float(k[-1] * array.radius))
    elif trunc < 1:
        raise ValueError(f"trunc must be at least 1, got {trunc}")
    modal = _modal_weights(k, array.radius, trunc)

    center = np.asarray(placement.array_pos, dtype=float)
    rotation = np.asarray(placement.array_orientation, dtype=float)
    doa = (positions - center) / distances[:, None]
    cos_psi = np.clip((doa @ rotation) @ array.mic_vectors.T, -1.0, 1.0)
    amplitude = gains / (4 * np.pi * distances)

    spectra = np.zeros((array.num_mics, freqs.shape[0]), dtype=complex)
    exact = orders <= cfg.exact_order
    if np.any(exact):
        phase = np.exp(-1j * np.outer(k, distances[exact])) * amplitude[exact]
        legendre = legendre_series(trunc, cos_psi[exact])
        for m in range(array.num_mics):
            spectra[m] = np.sum(modal * (phase @ legendre[:, :, m].T), axis=1)

    late = ~exact
    if np.any(late):
        fine = LATE_OVERSAMPLE * nfft
        samples = np.rint(distances[late] / c * fs * LATE_OVERSAMPLE).astype(np.int64)
        valid = samples < fine
        cos_late = cos_psi[late][valid]
        weight = amplitude[late][valid]
        flat = (np.arange(array.num_mics)[None, :] * fine + samples[valid][:, None]).ravel()
        p_prev = np.ones_like(cos_late)
        p_curr = cos_late
        for n in range(trunc + 1):
            if n == 0:
                p_n = p_prev
            elif n == 1:
                p_n = p_curr
            else:
                p_n = ((2 * n - 1) * cos_late * p_curr - (n - 1) * p_prev) / n
                p_prev, p_curr = p_curr, p_n
            taps = np.bincount(flat, weights=(weight[:, None] * p_n).ravel(), minlength=array.num_mics * fine)
            spectrum = np.fft.rfft(taps.reshape(array.num_mics, fine), axis=1)[:, : freqs.shape[0]]
            spectra += modal[None, :, n] * spectrum
    return spectra * band_taper(freqs, fs)


def band_taper(freqs: np.ndarray, sample_rate: int, start: float = TAPER_START) -> np.ndarray:
    """Raised-cosine roll-off from start * Nyquist down to zero at Nyquist."""
    nyquist = sample_rate / 2.0
    edge = start * nyquist
    taper = np.ones_like(freqs, dtype=float)
    band = freqs > edge
    taper[band] = 0.5 * (1.0 + np.cos(np.pi * (freqs[band] - edge) / (nyquist - edge)))
    return taper


def _to_time(spectra: np.ndarray, nfft: int, length: int) -> np.ndarray:
    spectra = spectra.copy()
    spectra[..., 0] = spectra[..., 0].real
    if nfft % 2 == 0:
        spectra[..., -1] = spectra[..., -1].real
    return np.fft.irfft(spectra, n=nfft, axis=-1)[..., :length]


def gate_start(placement: Placement, array: ArraySpec, speed_of_sound: float, guard: int) -> int:
    earliest = (placement.distance - array.radius) / speed_of_sound * array.sample_rate
    return max(0, int(math.floor(earliest)) - guard)


def causal_gate(channels: np.ndarray, start: int, guard: int) -> np.ndarray:
    """Zero everything before start and fade in with a half Hann over the next guard samples."""
    out = np.array(channels, dtype=float, copy=True)
    out[..., :start] = 0.0
    if guard > 0:
        stop = min(start + guard, out.shape[-1])
        ramp = np.sin(0.5 * np.pi * (np.arange(stop - start) + 0.5) / guard) ** 2
        out[..., start:stop] *= ramp
    return out


def simulate_mic_rirs(
    room: RoomSpec,
    placement: Placement,
    array: ArraySpec,
    length_samples: int,
    cfg: Optional[RoomSamplingConfig] = None,
    trunc: Optional[int] = None,
) -> np.ndarray:
    """M x length_samples microphone impulse responses on the rigid sphere."""
    cfg = cfg or RoomSamplingConfig(speed_of_sound=room.speed_of_sound)
    _check_length(room, array.sample_rate, length_samples)
    nfft = next_pow2(length_samples)
    spectra = mic_spectra(room, placement, array, nfft, length_samples, cfg, trunc)
    rirs = _to_time(spectra, nfft, length_samples)
    start = gate_start(placement, array, room.speed_of_sound, cfg.onset_guard)
    return causal_gate(rirs, start, cfg.onset_guard)


def simulate_sh_rir(
    room: RoomSpec,
    placement: Placement,
    array: ArraySpec,
    cfg: EncodingConfig,
    length_samples: int,
    sampling: Optional[RoomSamplingConfig] = None,
    seed: int = 0,
) -> ShIR:
    if cfg.convention == FoaConvention.COMPLEX:
        raise ValueError("Complex spherical-harmonic coefficients have no real time-domain form; pick a real convention.")
    sampling = sampling or RoomSamplingConfig(speed_of_sound=room.speed_of_sound)
    _check_length(room, array.sample_rate, length_samples)
    nfft = next_pow2(length_samples)
    spectra = mic_spectra(room, placement, array, nfft, length_samples, sampling, cfg.trunc_order)
    k = 2 * np.pi * np.fft.rfftfreq(nfft, d=1.0 / array.sample_rate) / room.speed_of_sound
    coefficients = convert_sh(encode_sh_bins(spectra.T, k, array, cfg), cfg.convention)
    channels = _to_time(coefficients.T, nfft, length_samples)
    start = gate_start(placement, array, room.speed_of_sound, sampling.onset_guard)
    channels = causal_gate(channels, start, sampling.onset_guard)
    metadata = RirMetadata(
        room=room,
        placement=placement,
        seed=seed,
        doa=placement.source_direction(),
        distance=placement.distance,
    )
    return ShIR(channels=channels, sample_rate=array.sample_rate, convention=cfg.convention, metadata=metadata)


def _backward_db(energy: np.ndarray) -> np.ndarray:
    total = np.cumsum(energy[::-1])[::-1]
    if total[0] <= 0:
        raise ValueError("Impulse response has no energy.")
    return 10 * np.log10(np.maximum(total / total[0], 1e-300))


def schroeder_decay(ir: np.ndarray) -> np.ndarray:
    """Backward-integrated energy in dB, 0 dB at the first sample."""
    return _backward_db(np.asarray(ir, dtype=float) ** 2)


def _t30(decay: np.ndarray, sample_rate: int) -> float:
    fit = np.flatnonzero((decay <= -5.0) & (decay >= -35.0))
    if fit.size < 2 or decay.min() > -35.0:
        raise ValueError("Decay does not reach -35 dB; impulse response too short for a T30 estimate.")
    slope = np.polyfit(fit / sample_rate, decay[fit], 1)[0]
    if slope >= 0:
        raise ValueError("Schroeder curve is not decaying.")
    return float(-60.0 / slope)


def estimate_t60(ir: np.ndarray, sample_rate: int, start: int = 0) -> float:
    """T30 estimate: line fit of the Schroeder curve between -5 and -35 dB, extrapolated to -60 dB."""
    return _t30(schroeder_decay(np.asarray(ir)[start:]), sample_rate)


def calibrate_absorption(
    room: RoomSpec,
    placement: Placement,
    sample_rate: int,
    length_samples: int,
    cfg: Optional[RoomSamplingConfig] = None,
) -> float:
    """Absorption whose image energy envelope at the array decays with a T30 of room.rt60.

    The envelope carries the direct sound, the discrete early reflections and
    the same order, gain and length cutoffs as the synthesis, so a Schroeder
    fit on the rendered omni channel lands on the requested rt60.
    """
    cfg = cfg or RoomSamplingConfig(speed_of_sound=room.speed_of_sound)
    c = room.speed_of_sound
    _, orders, _, distances = image_arrays(room, placement, 0.0, MAX_ORDER_CAP, 0.0, length_samples * c / sample_rate)
    samples = np.rint(distances / c * sample_rate).astype(np.int64)
    inside = samples < length_samples
    orders, samples = orders[inside], samples[inside]
    spreading = 1.0 / (4 * np.pi * distances[inside]) ** 2
    span = 10.0 * room.rt60

    def error(alpha: float) -> float:
        power = (1.0 - alpha) ** orders
        keep = (orders <= default_max_order(alpha)) & (power >= cfg.min_gain**2)
        energy = np.bincount(samples[keep], weights=power[keep] * spreading[keep], minlength=length_samples)
        decay = _backward_db(energy)
        if decay.min() > -35.0:
            return span
        try:
            return min(_t30(decay, sample_rate) - room.rt60, span)
        except ValueError:
            return -span

    grid = np.geomspace(0.005, MAX_ABSORPTION, CALIBRATION_GRID)
    errors = np.array([error(float(a)) for a in grid])
    crossing = np.flatnonzero(errors <= 0.0)
    if crossing.size == 0:
        logger.warning("Room %s cannot decay within rt60=%.3fs; using absorption %.2f", room.dims, room.rt60, MAX_ABSORPTION)
        return MAX_ABSORPTION
    first = int(crossing[0])
    if first == 0:
        return float(grid[0])
    return float(brentq(error, grid[first - 1], grid[first], xtol=1e-5))


def direct_onset(placement: Placement, speed_of_sound: float, sample_rate: int) -> float:
    return placement.distance / speed_of_sound * sample_rate


def sample_room(rng: np.random.Generator, cfg: RoomSamplingConfig, attempts: int = 1000) -> Tuple[RoomSpec, float]:
    """Draw room dims and rt60 until the absorption is realizable; returns (room, alpha)."""
    for _ in range(attempts):
        dims = (
            float(rng.uniform(*cfg.length_range)),
            float(rng.uniform(*cfg.width_range)),
            float(rng.uniform(*cfg.height_range)),
        )
        room = RoomSpec(dims=dims, rt60=float(rng.uniform(*cfg.rt60_range)), speed_of_sound=cfg.speed_of_sound)
        try:
            alpha = rt60_to_absorption(room, cfg.absorption_model)
        except ValueError:
            continue
        return room, alpha
    raise ValueError(f"No realizable room in {attempts} draws; widen the dimension ranges or rt60 range.")


def sample_placement(
    rng: np.random.Generator,
    room: RoomSpec,
    cfg: RoomSamplingConfig,
    attempts: int = 1000,
) -> Placement:
    dims = np.asarray(room.dims, dtype=float)
    margin = cfg.wall_margin
    if np.any(dims <= 2 * margin):
        raise ValueError(f"Room {room.dims} is too small for wall margin {margin} m")
    low_dist, high_dist = cfg.distance_range
    for _ in range(attempts):
        array_pos = rng.uniform(margin, dims - margin)
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
        if norm == 0:
            continue
        distance = float(rng.uniform(low_dist, high_dist))
        source_pos = array_pos + distance * direction / norm
        if np.all(source_pos > margin) and np.all(source_pos < dims - margin):
            return Placement(source_pos=source_pos, array_pos=array_pos)
    raise ValueError(f"No placement with distance in {cfg.distance_range} fits room {room.dims}")
