"""Signal transforms: log-mel extraction, energy masking, random resampling,
time shifting, and the phase-reconstruction fallback vocoder.

Spectrogram-like arrays are time-major: ``(..., frames, channels)``.
"""
from __future__ import annotations

import math
from functools import lru_cache

import librosa
import numpy as np

from foleygen.config import ModelConfig, ResampleSpec
from foleygen.errors import DegenerateInputError, InvalidAudioError


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Slaney-normalized triangular filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fb = librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax)
    fb.setflags(write=False)
    return fb


def _magnitude_stft(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    return np.abs(librosa.stft(samples, n_fft=n_fft, hop_length=hop, win_length=n_fft,
                               window="hann", center=True, pad_mode="reflect"))


def extract_mel(samples, cfg: ModelConfig, sample_rate: int | None = None,
                n_frames: int | None = -1) -> np.ndarray:
    """Log-mel spectrogram of a mono waveform, shape ``(frames, n_mels)``.

    ``n_frames=-1`` (default) forces ``cfg.mel_frames`` frames by truncating or
    zero-padding the audio; ``None`` keeps ``len(samples) // hop`` frames.
    """
    if sample_rate is not None and sample_rate != cfg.sample_rate:
        raise InvalidAudioError(f"sample rate {sample_rate} Hz rejected; expected {cfg.sample_rate} Hz")
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise InvalidAudioError("empty waveform")
    if not np.all(np.isfinite(x)):
        raise InvalidAudioError("waveform contains NaN or infinite samples")
    if n_frames == -1:
        n_frames = cfg.mel_frames
    if n_frames is None:
        n_frames = max(1, x.size // cfg.hop_size)
    # Only samples that can reach the first n_frames windows matter; dropping the
    # rest keeps the output invariant to trailing audio past the horizon.
    keep = n_frames * cfg.hop_size
    x = x[:keep] if x.size >= keep else np.pad(x, (0, keep - x.size))
    mag = _magnitude_stft(x, cfg.n_fft, cfg.hop_size)[:, :n_frames]
    fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    mel = fb @ mag
    return np.log(np.maximum(mel, cfg.mel_floor)).T.astype(np.float32)


def silence_mel(cfg: ModelConfig, n_frames: int | None = None) -> np.ndarray:
    n_frames = cfg.mel_frames if n_frames is None else n_frames
    return np.full((n_frames, cfg.n_mels), math.log(cfg.mel_floor), dtype=np.float32)


def frame_energy(m: np.ndarray) -> np.ndarray:
    """Linear-domain energy per frame: sum over bins of ``exp(log-mel)``."""
    return np.exp(np.asarray(m, dtype=np.float64)).sum(axis=-1)


def energy_mask(m: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """Floor every frame whose energy is strictly above the clip median.

    Works on ``(frames, bins)`` or batched ``(batch, frames, bins)`` input; the
    median is taken per clip along the time axis.
    """
    m = np.asarray(m)
    if m.shape[-2] < 1:
        raise DegenerateInputError("energy_mask needs at least one frame")
    e = frame_energy(m)
    loud = e > np.median(e, axis=-1, keepdims=True)
    out = m.copy()
    out[loud] = np.log(floor)
    return out


# --------------------------------------------------------------------------
# random resampling


def resample_plan(n_frames: int, boundaries, factors, order):
    """Index/weight plan for a pinned segment -> stretch -> permute -> fit.

    ``boundaries`` are interior cut points (sorted, in ``1..n_frames-1``);
    ``factors`` one stretch factor per segment; ``order`` a permutation of the
    segment indices.  Returns ``(lo, hi, frac)`` so that the output frame ``j``
    is ``x[lo[j]] * (1 - frac[j]) + x[hi[j]] * frac[j]``.
    """
    edges = [0, *[int(b) for b in boundaries], n_frames]
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise DegenerateInputError(f"empty segment in boundaries {list(boundaries)}")
    if len(factors) != len(edges) - 1 or sorted(order) != list(range(len(edges) - 1)):
        raise ValueError("factors/order do not match the segment count")
    pieces = []
    for seg in order:
        start, stop = edges[seg], edges[seg + 1]
        length = stop - start
        new_length = max(1, int(round(length * float(factors[seg]))))
        if length == 1:
            pos = np.full(new_length, float(start))
        else:
            pos = start + np.linspace(0.0, length - 1, new_length)
        pieces.append(pos)
    pos = np.concatenate(pieces)
    if pos.size >= n_frames:
        offset = (pos.size - n_frames) // 2
        pos = pos[offset:offset + n_frames]
    else:
        pos = np.concatenate([pos, np.full(n_frames - pos.size, pos[-1])])
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_frames - 1)
    frac = pos - lo
    return lo, hi, frac


def draw_resample(n_frames: int, spec: ResampleSpec, rng: np.random.Generator):
    """Draw (boundaries, factors, order) for one application of the transform."""
    k_min, k_max = spec.segment_count_range
    if n_frames < k_min:
        raise DegenerateInputError(f"{n_frames} frames is fewer than k_min={k_min}")
    k = int(rng.integers(k_min, min(k_max, n_frames) + 1))
    boundaries = np.sort(rng.choice(np.arange(1, n_frames), size=k - 1, replace=False))
    lo, hi = spec.stretch_range
    factors = rng.uniform(lo, hi, size=k)
    order = rng.permutation(k)
    return boundaries, factors, order


def apply_plan(x: np.ndarray, plan) -> np.ndarray:
    lo, hi, frac = plan
    w = frac[:, None]
    return (x[lo] * (1.0 - w) + x[hi] * w).astype(x.dtype, copy=False)


def random_resample(x, spec: ResampleSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Segment, stretch and shuffle a ``(frames, channels)`` matrix along time.

    Deterministic given ``spec.seed`` (or the supplied ``rng``); output shape
    equals input shape.
    """
    x = np.asarray(x)
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    plan = resample_plan(x.shape[0], *draw_resample(x.shape[0], spec, rng))
    return apply_plan(x, plan)


# --------------------------------------------------------------------------
# time shift


def draw_shift(n_frames: int, rng: np.random.Generator) -> int:
    if n_frames < 10:
        raise DegenerateInputError(f"time_shift needs >= 10 frames, got {n_frames}")
    margin = math.ceil(0.1 * n_frames)
    return int(rng.integers(margin, n_frames - margin + 1))


def time_shift(m, seed=None, shift: int | None = None) -> np.ndarray:
    """Circularly shift a ``(frames, bins)`` matrix forward in time.

    The shift is drawn from ``[ceil(0.1 T), T - ceil(0.1 T)]`` unless pinned.
    """
    m = np.asarray(m)
    if shift is None:
        shift = draw_shift(m.shape[0], np.random.default_rng(seed))
    elif m.shape[0] < 10:
        raise DegenerateInputError(f"time_shift needs >= 10 frames, got {m.shape[0]}")
    return np.roll(m, int(shift), axis=0)


# --------------------------------------------------------------------------
# vocoder fallback


def mel_to_waveform(m: np.ndarray, cfg: ModelConfig, n_iter: int = 32, seed: int = 0) -> np.ndarray:
    """Invert a log-mel spectrogram with Griffin-Lim phase reconstruction."""
    mel = np.exp(np.asarray(m, dtype=np.float64)).T
    mag = librosa.feature.inverse.mel_to_stft(mel, sr=cfg.sample_rate, n_fft=cfg.n_fft, power=1.0,
                                              fmin=cfg.fmin, fmax=cfg.fmax)
    y = librosa.griffinlim(mag, n_iter=n_iter, hop_length=cfg.hop_size, win_length=cfg.n_fft,
                           random_state=seed, init="random")
    peak = np.max(np.abs(y)) if y.size else 0.0
    if peak > 1.0:
        y = y / peak
    return y.astype(np.float32)
