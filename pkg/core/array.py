from __future__ import annotations

import logging
import math
import threading
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy.special import gammaln

from core.config import EncodingConfig
from core.special import legendre_series, sph_hankel1_deriv, sph_harmonic_matrix
from core.types import ArraySpec, FoaConvention, MicSpectrum, ShSpectrum, SphDirection

logger = logging.getLogger(__name__)

KR_FLOOR = 1e-6
MAX_TRUNC = 60
DEFAULT_ARRAY_PATH = Path(__file__).resolve().parent.parent / "data" / "em32.txt"

_CACHE_LOCK = threading.Lock()
_SH_CACHE: Dict[Tuple[ArraySpec, int], Tuple[np.ndarray, np.ndarray]] = {}


def auto_trunc(kr: float) -> int:
    return min(int(math.ceil(kr)) + 10, MAX_TRUNC)


def _radial_low(n: int, kr: np.ndarray) -> np.ndarray:
    # b_n(z) ~ z^n / ((n + 1) (2n - 1)!!) as z -> 0
    if n == 0:
        return np.ones_like(kr, dtype=complex)
    log_dfact = gammaln(2 * n + 1) - n * math.log(2.0) - gammaln(n + 1)
    out = np.zeros_like(kr, dtype=complex)
    positive = kr > 0
    out[positive] = np.exp(n * np.log(kr[positive]) - math.log(n + 1) - log_dfact)
    return out


def radial_fn(n: int, kr: Union[float, np.ndarray]) -> Union[complex, np.ndarray]:
    """Rigid-baffle radial function b_n(kR) = i / ((kR)^2 h_n'(kR))."""
    values = np.atleast_1d(np.asarray(kr, dtype=float))
    if np.any(values < 0):
        raise ValueError(f"kR must be non-negative, got {kr}")
    out = np.empty(values.shape, dtype=complex)
    small = values <= KR_FLOOR
    out[small] = _radial_low(n, values[small])
    if np.any(~small):
        z = values[~small]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            deriv = np.atleast_1d(sph_hankel1_deriv(n, z))
            b = 1j / (z**2 * deriv)
        bad = ~np.isfinite(b)
        if np.any(bad):
            b[bad] = _radial_low(n, z[bad])
        out[~small] = b
    if np.ndim(kr) == 0:
        return complex(out[0])
    return out


def plane_wave_response(
    k: float,
    psi: Union[float, np.ndarray],
    array_radius: float,
    trunc: Optional[int] = None,
) -> Union[complex, np.ndarray]:
    """Rigid-sphere pressure for a unit plane wave, psi measured from the DOA.

    conj(b_n) puts the series in numpy's DFT sign convention (delay = exp(-i w t)).
    """
    kr = k * array_radius
    order = auto_trunc(kr) if trunc is None else int(trunc)
    cos_psi = np.cos(np.asarray(psi, dtype=float))
    legendre = legendre_series(order, cos_psi)
    total = np.zeros(cos_psi.shape, dtype=complex)
    for n in range(order + 1):
        total = total + (1j**n) * (2 * n + 1) * np.conj(radial_fn(n, kr)) * legendre[n]
    if np.ndim(total) == 0:
        return complex(total)
    return total


def mode_strength(kr: np.ndarray, order: int) -> np.ndarray:
    """B_n(k) = 4 pi i^n conj(b_n(kR)), shape (bins, order + 1)."""
    kr = np.atleast_1d(np.asarray(kr, dtype=float))
    out = np.empty((kr.shape[0], order + 1), dtype=complex)
    for n in range(order + 1):
        out[:, n] = 4 * np.pi * (1j**n) * np.conj(np.atleast_1d(radial_fn(n, kr)))
    return out


def soft_limit(ratio: np.ndarray, max_gain: float) -> np.ndarray:
    magnitude = np.abs(ratio)
    out = np.zeros_like(ratio, dtype=complex)
    nonzero = magnitude > 0
    out[nonzero] = (
        (2 * max_gain / np.pi)
        * (ratio[nonzero] / magnitude[nonzero])
        * np.arctan(np.pi * magnitude[nonzero] / (2 * max_gain))
    )
    return out


def inverse_mode_gains(kr: np.ndarray, order: int, max_gain_db: float) -> np.ndarray:
    """Regularized 1/B_n per order; orders >= 1 are soft-limited relative to order 0."""
    if not math.isfinite(max_gain_db):
        raise ValueError(f"reg_max_gain_db must be finite, got {max_gain_db}")
    strength = mode_strength(kr, order)
    gains = np.zeros_like(strength)
    gains[:, 0] = 1.0 / strength[:, 0]
    max_gain = 10 ** (max_gain_db / 20)
    for n in range(1, order + 1):
        ratio = np.zeros(strength.shape[0], dtype=complex)
        usable = np.abs(strength[:, n]) > 0
        ratio[usable] = strength[usable, 0] / strength[usable, n]
        gains[:, n] = gains[:, 0] * soft_limit(ratio, max_gain)
    return gains


def expand_orders(per_order: np.ndarray) -> np.ndarray:
    """Repeat a (..., N+1) per-order array onto (..., (N+1)^2) ACN channels."""
    order = per_order.shape[-1] - 1
    index = np.concatenate([[n] * (2 * n + 1) for n in range(order + 1)])
    return per_order[..., index]


def _cached_matrices(array: ArraySpec, order: int) -> Tuple[np.ndarray, np.ndarray]:
    key = (array, order)
    with _CACHE_LOCK:
        hit = _SH_CACHE.get(key)
    if hit is not None:
        return hit
    matrix = sph_harmonic_matrix(order, array.azimuths, array.elevations)
    pinv = np.linalg.pinv(matrix)
    matrix.setflags(write=False)
    pinv.setflags(write=False)
    with _CACHE_LOCK:
        return _SH_CACHE.setdefault(key, (matrix, pinv))


def check_order(array: ArraySpec, order: int) -> None:
    if order < 0:
        raise ValueError(f"Encoding order must be non-negative, got {order}")
    if (order + 1) ** 2 > array.num_mics:
        raise ValueError(f"Order {order} needs {(order + 1) ** 2} microphones, array {array.name} has {array.num_mics}.")


def sh_matrix(array: ArraySpec, order: int) -> np.ndarray:
    check_order(array, order)
    return _cached_matrices(array, order)[0]


def encoder_matrix(array: ArraySpec, order: int) -> np.ndarray:
    check_order(array, order)
    return _cached_matrices(array, order)[1]


def encode_sh(x: MicSpectrum, array: ArraySpec, cfg: EncodingConfig) -> ShSpectrum:
    values = np.asarray(x.values, dtype=complex)
    if values.shape != (array.num_mics,):
        raise ValueError(f"Expected {array.num_mics} microphone values, got shape {values.shape}.")
    encoded = encode_sh_bins(values[None, :], np.array([x.k]), array, cfg)
    return ShSpectrum(values=encoded[0], k=x.k)


def encode_sh_bins(spectra: np.ndarray, k: np.ndarray, array: ArraySpec, cfg: EncodingConfig) -> np.ndarray:
    """Encode (bins, mics) spectra to (bins, (N+1)^2) complex SH coefficients."""
    pinv = encoder_matrix(array, cfg.order)
    gains = expand_orders(inverse_mode_gains(np.asarray(k) * array.radius, cfg.order, cfg.reg_max_gain_db))
    return (spectra @ pinv.T) * gains


def conversion_matrix(order: int, convention: FoaConvention) -> np.ndarray:
    """Maps complex orthonormal ACN coefficients onto the requested convention."""
    size = (order + 1) ** 2
    if convention == FoaConvention.COMPLEX:
        return np.eye(size, dtype=complex)
    matrix = np.zeros((size, size), dtype=complex)
    for n in range(order + 1):
        scale = 1.0
        if convention == FoaConvention.N3D_ACN:
            scale = math.sqrt(4 * math.pi)
        elif convention == FoaConvention.SN3D_ACN:
            scale = math.sqrt(4 * math.pi / (2 * n + 1))
        base = n * n + n
        matrix[base, base] = scale
        for m in range(1, n + 1):
            sign = (-1) ** m
            pos, neg = base + m, base - m
            matrix[pos, pos] = scale * sign / math.sqrt(2)
            matrix[pos, neg] = scale / math.sqrt(2)
            matrix[neg, pos] = scale * 1j * sign / math.sqrt(2)
            matrix[neg, neg] = -scale * 1j / math.sqrt(2)
    return matrix


def convert_sh(coefficients: np.ndarray, convention: FoaConvention) -> np.ndarray:
    """Apply conversion_matrix along the last axis."""
    size = coefficients.shape[-1]
    order = int(round(math.sqrt(size))) - 1
    return coefficients @ conversion_matrix(order, convention).T


def intensity_vector(channels: np.ndarray) -> np.ndarray:
    """Active intensity (x, y, z) from SN3D/ACN first-order channels [W, Y, Z, X, ...]."""
    w, y, z, x = channels[0], channels[1], channels[2], channels[3]
    conj_w = np.conj(w)
    return np.array([np.real(np.sum(conj_w * x)), np.real(np.sum(conj_w * y)), np.real(np.sum(conj_w * z))])


def intensity_doa(channels: np.ndarray) -> SphDirection:
    return SphDirection.from_vector(intensity_vector(channels))


def band_intensity_doa(
    foa: np.ndarray,
    sample_rate: int,
    f_min: float = 100.0,
    f_max: float = 4000.0,
) -> SphDirection:
    """Intensity DOA of time-domain SN3D/ACN channels using only bins in [f_min, f_max]."""
    spectra = np.fft.rfft(np.asarray(foa, dtype=float)[:4], axis=-1)
    freqs = np.fft.rfftfreq(foa.shape[-1], d=1.0 / sample_rate)
    band = (freqs >= f_min) & (freqs <= f_max)
    if not np.any(band):
        raise ValueError(f"No frequency bins in [{f_min}, {f_max}] Hz for {foa.shape[-1]} samples")
    return intensity_doa(spectra[:, band])


def load_array_spec(path: Path, sample_rate: int = 24000) -> ArraySpec:
    lines = path.read_text(encoding="utf-8").splitlines()
    radius: Optional[float] = None
    dirs = []
    expected_index: Optional[int] = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if radius is None:
            if not line.startswith("radius_m="):
                raise ValueError(f"{path}:{lineno}: expected header 'radius_m=<float>', got {line!r}")
            try:
                radius = float(line.split("=", 1)[1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad radius {line!r}") from exc
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'index azimuth_deg elevation_deg', got {line!r}")
        try:
            index = int(parts[0])
            azimuth, elevation = float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-numeric field in {line!r}") from exc
        if expected_index is not None and index != expected_index:
            raise ValueError(f"{path}:{lineno}: expected microphone index {expected_index}, got {index}")
        expected_index = index + 1
        dirs.append(SphDirection.from_degrees(azimuth, elevation))
    if radius is None:
        raise ValueError(f"{path}: missing 'radius_m=' header")
    return ArraySpec(radius=radius, mic_dirs=tuple(dirs), sample_rate=sample_rate, name=path.stem)


def default_array(sample_rate: int = 24000) -> ArraySpec:
    return load_array_spec(DEFAULT_ARRAY_PATH, sample_rate=sample_rate)
