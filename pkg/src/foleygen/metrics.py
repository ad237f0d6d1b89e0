"""Objective evaluation: mel-cepstral-style distortion, timbre similarity
with a spectral-envelope embedding, and onset alignment against known events.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from foleygen.dsp import frame_energy
from foleygen.errors import ShapeError, UndefinedSimilarityError

MCD_CONSTANT = 10.0 / math.log(10.0)
EMBED_DIM = 64
EMBED_SEED = 1993


def mcd(m: np.ndarray, m_hat: np.ndarray) -> float:
    """``(10 / ln 10) * mean_t sqrt(2 * sum_bins (m - m_hat)^2)`` over log-mel frames."""
    m = np.asarray(m, dtype=np.float64)
    m_hat = np.asarray(m_hat, dtype=np.float64)
    if m.shape != m_hat.shape:
        raise ShapeError(f"mcd needs equal shapes, got {m.shape} and {m_hat.shape}")
    per_frame = np.sqrt(2.0 * ((m - m_hat) ** 2).sum(axis=-1))
    return float(MCD_CONSTANT * per_frame.mean())


def cosine_similarity(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"dimension mismatch {x.shape} vs {y.shape}")
    nx, ny = math.sqrt(float(x @ x)), math.sqrt(float(y @ y))
    if nx == 0.0 or ny == 0.0:
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero vector")
    return float(np.clip((x @ y) / (nx * ny), -1.0, 1.0))


@lru_cache(maxsize=4)
def _embed_projection(n_bins: int) -> np.ndarray:
    p = np.random.default_rng(EMBED_SEED).standard_normal((EMBED_DIM, n_bins)) / math.sqrt(n_bins)
    p.setflags(write=False)
    return p


def timbre_embedding(m: np.ndarray) -> np.ndarray:
    """Unit-norm 64-d summary of the spectral envelope of the loud frames.

    Loud frames are those the energy mask would remove (energy above the clip
    median); a clip with none falls back to every frame.
    """
    m = np.asarray(m, dtype=np.float64)
    e = frame_energy(m)
    loud = e > np.median(e)
    frames = m[loud] if loud.any() else m
    envelope = frames.mean(axis=0)
    envelope = envelope - envelope.mean()
    v = _embed_projection(m.shape[-1]) @ envelope
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise UndefinedSimilarityError("flat spectral envelope has no timbre embedding")
    return v / norm


def timbre_similarity(a: np.ndarray, b: np.ndarray) -> float:
    return cosine_similarity(timbre_embedding(a), timbre_embedding(b))


def detect_onsets(m: np.ndarray, min_rise: float = 1.0, k_mad: float = 6.0, min_gap: int = 4) -> list[int]:
    """Frames where log frame energy jumps: local maxima of its first difference.

    A peak must exceed ``max(min_rise, median + k_mad * MAD)`` of the difference
    sequence; peaks closer than ``min_gap`` frames keep only the largest.
    """
    log_e = np.log(frame_energy(m))
    d = np.diff(log_e, prepend=log_e[:1])
    if d.size < 3:
        return []
    med = np.median(d)
    mad = np.median(np.abs(d - med))
    thr = max(min_rise, med + k_mad * mad)
    padded = np.concatenate([[-np.inf], d, [-np.inf]])
    peaks = [t for t in range(d.size)
             if d[t] > thr and d[t] >= padded[t] and d[t] > padded[t + 2]]
    kept: list[int] = []
    for t in sorted(peaks, key=lambda t: -d[t]):
        if all(abs(t - k) >= min_gap for k in kept):
            kept.append(t)
    return sorted(kept)


def match_onsets(detected, truth, tol: int) -> list[tuple[int, int]]:
    """Greedy closest-first one-to-one matching within ``tol`` frames."""
    pairs = sorted((abs(d - g), d, g) for d in detected for g in truth if abs(d - g) <= tol)
    used_d, used_g, matches = set(), set(), []
    for _, d, g in pairs:
        if d not in used_d and g not in used_g:
            used_d.add(d)
            used_g.add(g)
            matches.append((d, g))
    return matches


def onset_alignment(m_hat: np.ndarray, ground_truth_events, tol_frames: int = 3,
                    timebase: int = 4) -> tuple[float, float]:
    """``(hit_rate, mean_offset)`` of detected onsets against known events.

    Events are given in video frames and mapped to mel frames by ``timebase``.
    With no events the hit rate is 1.0 when nothing is detected, else 0.0;
    the mean offset is NaN when no event is matched.
    """
    truth = [timebase * int(e) for e in ground_truth_events]
    detected = detect_onsets(m_hat)
    if not truth:
        return (1.0 if not detected else 0.0), (0.0 if not detected else math.nan)
    matches = match_onsets(detected, truth, tol_frames)
    hit_rate = len(matches) / len(truth)
    offset = float(np.mean([abs(d - g) for d, g in matches])) if matches else math.nan
    return hit_rate, offset
