from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np
from scipy.signal import fftconvolve, get_window

from core.types import CovariancePerBin, Spectrogram


def stft_sizes(sample_rate: int, frame_ms: float, hop_ms: float) -> Tuple[int, int]:
    frame_len = int(round(sample_rate * frame_ms / 1000.0))
    hop = int(round(sample_rate * hop_ms / 1000.0))
    if frame_len < 2 or hop < 1:
        raise ValueError(f"STFT sizes too small: frame_len={frame_len}, hop={hop}")
    return frame_len, hop


def analysis_window(frame_len: int) -> np.ndarray:
    return get_window("hann", frame_len, fftbins=True)


def stft(signal: np.ndarray, frame_len: int, hop: int, sample_rate: int = 24000) -> Spectrogram:
    """Multichannel STFT, values[channel, frame, bin]; frames start at sample 0."""
    data = np.atleast_2d(np.asarray(signal, dtype=float))
    if hop < 1 or hop > frame_len:
        raise ValueError(f"hop must be in [1, frame_len], got hop={hop}, frame_len={frame_len}")
    length = data.shape[-1]
    if length < frame_len:
        raise ValueError(f"Signal of {length} samples is shorter than one frame ({frame_len}).")
    num_frames = 1 + int(math.ceil((length - frame_len) / hop))
    padded_len = (num_frames - 1) * hop + frame_len
    padded = np.zeros((data.shape[0], padded_len))
    padded[:, :length] = data
    starts = np.arange(num_frames) * hop
    frames = padded[:, starts[:, None] + np.arange(frame_len)[None, :]]
    values = np.fft.rfft(frames * analysis_window(frame_len), axis=-1)
    return Spectrogram(values=values, frame_len=frame_len, hop=hop, sample_rate=sample_rate, length=length)


def istft(spec: Spectrogram) -> np.ndarray:
    """Weighted overlap-add inverse; returns channels x spec.length samples."""
    window = analysis_window(spec.frame_len)
    frames = np.fft.irfft(spec.values, n=spec.frame_len, axis=-1) * window
    num_frames = spec.num_frames
    total = (num_frames - 1) * spec.hop + spec.frame_len
    out = np.zeros((spec.num_channels, total))
    norm = np.zeros(total)
    for t in range(num_frames):
        start = t * spec.hop
        out[:, start : start + spec.frame_len] += frames[:, t]
        norm[start : start + spec.frame_len] += window**2
    nonzero = norm > 1e-10
    out[:, nonzero] /= norm[nonzero]
    return out[:, : spec.length]


def spatial_covariance(spec: Spectrogram, frame_range: Optional[Tuple[int, int]] = None) -> CovariancePerBin:
    start, stop = frame_range if frame_range is not None else (0, spec.num_frames)
    if not 0 <= start < stop <= spec.num_frames:
        raise ValueError(f"Frame range {start}:{stop} is empty or outside 0:{spec.num_frames}")
    x = spec.values[:, start:stop, :]
    cov = np.einsum("ctf,dtf->fcd", x, np.conj(x)) / (stop - start)
    cov = 0.5 * (cov + np.conj(np.swapaxes(cov, -1, -2)))
    return CovariancePerBin(values=cov, frame_count=stop - start)


def normalized_eigenvalues(cov: np.ndarray) -> np.ndarray:
    """Eigenvalues in descending order scaled so the largest is 1; works on stacks of matrices."""
    matrix = np.asarray(cov)
    hermitian = 0.5 * (matrix + np.conj(np.swapaxes(matrix, -1, -2)))
    values = np.linalg.eigvalsh(hermitian)[..., ::-1]
    top = values[..., :1]
    out = np.zeros_like(values)
    np.divide(values, top, out=out, where=top > 0)
    return out


def fft_convolve(signal: np.ndarray, ir: np.ndarray) -> np.ndarray:
    """Linear convolution of a mono signal with every row of ir."""
    source = np.asarray(signal, dtype=float).reshape(-1)
    kernels = np.atleast_2d(np.asarray(ir, dtype=float))
    return fftconvolve(source[None, :], kernels, mode="full", axes=-1)
