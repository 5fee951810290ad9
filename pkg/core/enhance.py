from __future__ import annotations

import logging
import math
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import eigh
from scipy.special import logsumexp

from core.config import EnhancementConfig, StftConfig
from core.dsp import istft, stft, stft_sizes
from core.types import EnhancedSource, EventSegment, Spectrogram, TfMasks

logger = logging.getLogger(__name__)

TARGET, NOISE = 0, 1
PHI_FLOOR = 1e-6
TINY = 1e-20


def _masked_covariance(y: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """y[f, t, c], weights[f, t] -> (f, c, c) weight-normalized covariance."""
    norm = np.maximum(weights.sum(axis=1), 1e-10)[:, None, None]
    cov = np.einsum("ft,ftc,ftd->fcd", weights, y, np.conj(y)) / norm
    return 0.5 * (cov + np.conj(np.swapaxes(cov, -1, -2)))


def _load_if_degenerate(cov: np.ndarray, label: str) -> np.ndarray:
    """Diagonal loading, growing tenfold until every bin is positive definite."""
    channels = cov.shape[-1]
    eye = np.eye(channels)
    out = cov.copy()
    for f in range(out.shape[0]):
        trace = float(np.real(np.trace(out[f])))
        if trace <= TINY:
            out[f] = eye * 1e-12
            continue
        if np.linalg.eigvalsh(out[f])[0] > 1e-10 * trace / channels:
            continue
        loading = 1e-6
        while True:
            if loading * trace / channels > trace:
                raise FloatingPointError(f"{label} covariance at bin {f} stays singular after loading beyond its trace")
            candidate = out[f] + loading * trace / channels * eye
            if np.linalg.eigvalsh(candidate)[0] > 1e-10 * trace / channels:
                logger.debug("%s covariance at bin %d loaded with %.1e", label, f, loading)
                out[f] = candidate
                break
            loading *= 10
    return out


def _initial_covariances(y: np.ndarray, spec: Spectrogram, cfg: EnhancementConfig) -> np.ndarray:
    frames = y.shape[1]
    edge = max(1, int(round(cfg.noise_init_ms / 1000.0 * spec.sample_rate / spec.hop)))
    noise_weights = np.zeros(frames)
    noise_weights[: min(edge, frames)] = 1.0
    noise_weights[max(frames - edge, 0) :] = 1.0
    energy = np.sum(np.abs(y) ** 2, axis=(0, 2))
    count = max(1, int(math.ceil(cfg.peak_fraction * frames)))
    peak = np.argsort(-energy, kind="stable")[:count]
    target_weights = np.zeros(frames)
    target_weights[peak] = 1.0
    bins = y.shape[0]
    target = _masked_covariance(y, np.broadcast_to(target_weights, (bins, frames)))
    noise = _masked_covariance(y, np.broadcast_to(noise_weights, (bins, frames)))
    return np.stack([_load_if_degenerate(target, "target"), _load_if_degenerate(noise, "noise")])


def _quadratic_forms(y: np.ndarray, cov: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """q[k, f, t] = y^H R_k^-1 y and log det R_k per bin."""
    inverse = np.linalg.inv(cov)
    q = np.real(np.einsum("ftc,kfcd,ftd->kft", np.conj(y), inverse, y))
    _, logdet = np.linalg.slogdet(cov)
    return np.maximum(q, 0.0), logdet


def cgmm_masks(
    spec: Spectrogram,
    iters: int = 10,
    cfg: Optional[EnhancementConfig] = None,
) -> Tuple[TfMasks, List[float], np.ndarray]:
    """Two-class complex Gaussian mixture per bin fitted by ECM.

    Returns the posterior masks, the log-likelihood at every E-step and the
    fitted spatial covariances (class, bin, channel, channel).
    """
    cfg = cfg or EnhancementConfig(iters=iters)
    if spec.num_channels < 2:
        raise ValueError(f"CGMM needs at least two channels, got {spec.num_channels}")
    if iters < 1:
        raise ValueError(f"iters must be at least 1, got {iters}")
    y = np.transpose(spec.values, (2, 1, 0))
    channels = y.shape[-1]
    floor = np.maximum(PHI_FLOOR * np.mean(np.sum(np.abs(y) ** 2, axis=-1), axis=1) / channels, TINY)
    cov = _initial_covariances(y, spec, cfg)
    q, logdet = _quadratic_forms(y, cov)
    phi = np.maximum(q / channels, floor[None, :, None])
    log_weights = np.full((2, y.shape[0]), math.log(0.5))
    history: List[float] = []
    posterior = np.zeros_like(q)
    for step in range(iters + 1):
        log_pdf = (
            -channels * math.log(math.pi)
            - channels * np.log(phi)
            - logdet[:, :, None]
            - q / phi
            + log_weights[:, :, None]
        )
        total = logsumexp(log_pdf, axis=0)
        history.append(float(np.sum(total)))
        posterior = np.exp(log_pdf - total[None])
        if step == iters:
            break
        phi = np.maximum(q / channels, floor[None, :, None])
        weights = posterior / phi
        norm = np.maximum(posterior.sum(axis=-1), 1e-10)[:, :, None, None]
        cov = np.einsum("kft,ftc,ftd->kfcd", weights, y, np.conj(y)) / norm
        cov = 0.5 * (cov + np.conj(np.swapaxes(cov, -1, -2)))
        cov = np.stack([_load_if_degenerate(cov[TARGET], "target"), _load_if_degenerate(cov[NOISE], "noise")])
        log_weights = np.log(np.maximum(posterior.mean(axis=-1), TINY))
        q, logdet = _quadratic_forms(y, cov)
    masks = TfMasks(target=posterior[TARGET].T.copy(), noise=posterior[NOISE].T.copy())
    return masks, history, cov


def condition_noise(cov: np.ndarray, reference: np.ndarray, loading: float = 1e-3) -> np.ndarray:
    """Diagonal loading of loading * trace / C on bins whose noise covariance is ill-conditioned."""
    channels = cov.shape[-1]
    eye = np.eye(channels)
    out = cov.copy()
    for f in range(out.shape[0]):
        trace = float(np.real(np.trace(out[f])))
        if trace <= TINY:
            scale = float(np.real(np.trace(reference[f]))) / channels
            out[f] = eye * max(loading * scale, 1e-12)
            logger.debug("Noise covariance at bin %d is empty; using a scaled identity", f)
            continue
        eig = np.linalg.eigvalsh(out[f])
        if eig[0] <= 1e-8 * eig[-1]:
            out[f] = out[f] + loading * trace / channels * eye
    return out


def souden_weights(target_cov: np.ndarray, noise_cov: np.ndarray, ref: int = 0, loading: float = 1e-3) -> np.ndarray:
    """MVDR weights (bins, channels): R_n^-1 R_x e_ref / trace(R_n^-1 R_x)."""
    if not 0 <= ref < target_cov.shape[-1]:
        raise ValueError(f"Reference channel {ref} out of range for {target_cov.shape[-1]} channels")
    noise = condition_noise(noise_cov, target_cov, loading)
    phi = np.linalg.solve(noise, target_cov)
    trace = np.real(np.trace(phi, axis1=-2, axis2=-1))
    return phi[..., ref] / np.maximum(trace, TINY)[:, None]


def rank1_target(target_cov: np.ndarray, noise_cov: np.ndarray) -> np.ndarray:
    """Rank-1 target covariance h h^H, trace-matched to target_cov.

    h = R_n v with v the principal generalized eigenvector of (R_x, R_n), so
    interferer energy leaking into the target mask does not enter the steering
    estimate. noise_cov must be positive definite.
    """
    out = np.zeros_like(target_cov)
    for f in range(target_cov.shape[0]):
        scale = float(np.real(np.trace(target_cov[f])))
        if scale <= TINY:
            continue
        _, vectors = eigh(target_cov[f], noise_cov[f])
        steer = noise_cov[f] @ vectors[:, -1]
        rank1 = np.outer(steer, np.conj(steer))
        out[f] = rank1 * (scale / max(float(np.real(np.trace(rank1))), TINY))
    return out


def apply_weights(spec: Spectrogram, weights: np.ndarray) -> Spectrogram:
    values = np.einsum("fc,ctf->tf", np.conj(weights), spec.values)[None]
    return Spectrogram(values=values, frame_len=spec.frame_len, hop=spec.hop, sample_rate=spec.sample_rate, length=spec.length)


def mask_covariances(spec: Spectrogram, masks: TfMasks) -> Tuple[np.ndarray, np.ndarray]:
    if masks.target.shape != (spec.num_frames, spec.num_bins) or masks.noise.shape != masks.target.shape:
        raise ValueError(
            f"Mask shape {masks.target.shape} does not match spectrogram ({spec.num_frames}, {spec.num_bins})"
        )
    y = np.transpose(spec.values, (2, 1, 0))
    return _masked_covariance(y, masks.target.T), _masked_covariance(y, masks.noise.T)


def mvdr_enhance(
    spec: Spectrogram,
    masks: TfMasks,
    ref: int = 0,
    loading: float = 1e-3,
    class_id: int = -1,
    provenance: str = "",
) -> EnhancedSource:
    mixture_cov, noise_cov = mask_covariances(spec, masks)
    noise_cov = condition_noise(noise_cov, mixture_cov, loading)
    target_cov = rank1_target(mixture_cov, noise_cov)
    weights = souden_weights(target_cov, noise_cov, ref, loading)
    audio = istft(apply_weights(spec, weights))[0]
    return EnhancedSource(
        audio=audio,
        class_id=class_id,
        provenance=provenance,
        target_cov=target_cov,
        noise_cov=noise_cov,
        weights=weights,
        sample_rate=spec.sample_rate,
    )


def enhance_segment(
    segment: EventSegment,
    cfg: Optional[EnhancementConfig] = None,
    stft_cfg: Optional[StftConfig] = None,
) -> EnhancedSource:
    cfg = cfg or EnhancementConfig()
    stft_cfg = stft_cfg or StftConfig()
    frame_len, hop = stft_sizes(segment.sample_rate, stft_cfg.frame_ms, stft_cfg.hop_ms)
    spec = stft(segment.audio, frame_len, hop, segment.sample_rate)
    masks, history, _ = cgmm_masks(spec, cfg.iters, cfg)
    logger.debug("%s: CGMM log-likelihood %.1f -> %.1f", segment.segment_id, history[0], history[-1])
    return mvdr_enhance(spec, masks, cfg.ref_channel, cfg.loading, segment.class_id, segment.segment_id)
