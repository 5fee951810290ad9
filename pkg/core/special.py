from __future__ import annotations

import math
from typing import Union

import numpy as np
from scipy.special import gammaln, lpmv, spherical_jn, spherical_yn

from core.types import SphDirection

ArrayLike = Union[float, np.ndarray]

MAX_DEGREE = 60
MAX_SH_ORDER = 10


def polar_arg(direction: SphDirection) -> float:
    """Inclination used inside Y_nm: pi/2 - elevation."""
    return math.pi / 2 - direction.elevation


def _check_unit_interval(x: ArrayLike) -> np.ndarray:
    values = np.asarray(x, dtype=float)
    if np.any(np.abs(values) > 1.0 + 1e-12):
        raise ValueError(f"Argument outside [-1, 1]: {x}")
    return np.clip(values, -1.0, 1.0)


def legendre_series(order: int, x: ArrayLike) -> np.ndarray:
    """P_0(x)..P_order(x) stacked on a leading axis, by upward recurrence."""
    if order < 0 or order > MAX_DEGREE:
        raise ValueError(f"Legendre degree must be within [0, {MAX_DEGREE}], got {order}")
    values = _check_unit_interval(x)
    out = np.empty((order + 1,) + values.shape)
    out[0] = 1.0
    if order >= 1:
        out[1] = values
    for n in range(1, order):
        out[n + 1] = ((2 * n + 1) * values * out[n] - n * out[n - 1]) / (n + 1)
    return out


def legendre(n: int, x: ArrayLike) -> ArrayLike:
    result = legendre_series(n, x)[n]
    return float(result) if np.ndim(result) == 0 else result


def assoc_legendre(n: int, m: int, x: ArrayLike) -> ArrayLike:
    """P_n^m(x) with the Condon-Shortley phase; negative m via the standard reflection."""
    if n < 0 or n > MAX_DEGREE:
        raise ValueError(f"Degree must be within [0, {MAX_DEGREE}], got {n}")
    if abs(m) > n:
        raise ValueError(f"|m| must not exceed n, got n={n}, m={m}")
    values = _check_unit_interval(x)
    mu = abs(m)
    result = lpmv(mu, n, values)
    if m < 0:
        result = (-1) ** mu * math.exp(gammaln(n - mu + 1) - gammaln(n + mu + 1)) * result
    return float(result) if np.ndim(result) == 0 else result


def _sh_norm(n: int, m: int) -> float:
    return math.sqrt((2 * n + 1) / (4 * math.pi) * math.exp(gammaln(n - m + 1) - gammaln(n + m + 1)))


def sph_harmonic(n: int, m: int, direction: SphDirection) -> complex:
    if n > MAX_SH_ORDER:
        raise ValueError(f"Spherical harmonic order must be <= {MAX_SH_ORDER}, got {n}")
    theta = polar_arg(direction)
    value = _sh_norm(n, m) * assoc_legendre(n, m, math.cos(theta))
    return complex(value * np.exp(1j * m * direction.azimuth))


def acn_index(n: int, m: int) -> int:
    return n * n + n + m


def sph_harmonic_matrix(order: int, azimuth: np.ndarray, elevation: np.ndarray) -> np.ndarray:
    """All Y_nm for n <= order in ACN order, one row per direction."""
    if order < 0 or order > MAX_SH_ORDER:
        raise ValueError(f"Spherical harmonic order must be within [0, {MAX_SH_ORDER}], got {order}")
    azimuth = np.atleast_1d(np.asarray(azimuth, dtype=float))
    cos_theta = np.cos(np.pi / 2 - np.atleast_1d(np.asarray(elevation, dtype=float)))
    out = np.empty((azimuth.shape[0], (order + 1) ** 2), dtype=complex)
    for n in range(order + 1):
        for m in range(-n, n + 1):
            out[:, acn_index(n, m)] = _sh_norm(n, m) * assoc_legendre(n, m, cos_theta) * np.exp(1j * m * azimuth)
    return out


def _check_positive(z: ArrayLike) -> np.ndarray:
    values = np.asarray(z, dtype=float)
    if np.any(values <= 0):
        raise ValueError(f"Spherical Hankel argument must be positive, got {z}")
    return values


def sph_hankel1(n: int, z: ArrayLike) -> ArrayLike:
    if n < 0 or n > MAX_DEGREE:
        raise ValueError(f"Hankel order must be within [0, {MAX_DEGREE}], got {n}")
    values = _check_positive(z)
    result = spherical_jn(n, values) + 1j * spherical_yn(n, values)
    return complex(result) if np.ndim(result) == 0 else result


def sph_hankel1_deriv(n: int, z: ArrayLike) -> ArrayLike:
    if n < 0 or n > MAX_DEGREE:
        raise ValueError(f"Hankel order must be within [0, {MAX_DEGREE}], got {n}")
    values = _check_positive(z)
    if n == 0:
        result = -(spherical_jn(1, values) + 1j * spherical_yn(1, values))
    else:
        h_prev = spherical_jn(n - 1, values) + 1j * spherical_yn(n - 1, values)
        h_n = spherical_jn(n, values) + 1j * spherical_yn(n, values)
        result = h_prev - (n + 1) / values * h_n
    return complex(result) if np.ndim(result) == 0 else result
