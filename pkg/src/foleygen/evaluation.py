"""Run the metric suite over a corpus split and build the JSON report."""
from __future__ import annotations

import math

import numpy as np
import torch

from foleygen import metrics
from foleygen.data import Corpus
from foleygen.errors import InsufficientDataError
from foleygen.model import Generator
from foleygen.train import infer_batch, stack_samples

REPORT_SCHEMA = {
    "type": "object",
    "required": ["mcd", "timbre_sim", "onset_hit_rate", "mean_offset", "config_hash",
                 "checkpoint_hash", "split", "n_samples", "ablate"],
    "properties": {
        "mcd": {"type": "number", "minimum": 0},
        "timbre_sim": {"type": "number", "minimum": -1, "maximum": 1},
        "onset_hit_rate": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "mean_offset": {"type": ["number", "null"], "minimum": 0},
        "timbre_swap_accuracy": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "config_hash": {"type": "string"},
        "data_hash": {"type": "string"},
        "checkpoint_hash": {"type": "string"},
        "split": {"type": "string"},
        "n_samples": {"type": "integer", "minimum": 1},
        "ablate": {"type": ["string", "null"]},
    },
}


def _nan_to_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def generate_split(gen: Generator, samples, refs=None, seed: int = 0, ablate=(), batch_size: int = 16):
    """Infer-mode outputs for ``samples``; ``refs`` (same length) default to the samples themselves."""
    refs = samples if refs is None else refs
    outs = []
    for i in range(0, len(samples), batch_size):
        video, _ = stack_samples(samples[i:i + batch_size])
        _, ref_mel = stack_samples(refs[i:i + batch_size])
        outs.append(infer_batch(gen, video, ref_mel, seed=seed + i, ablate=ablate).numpy())
    return list(np.concatenate(outs)) if outs else []


def swap_pairs(families: list[int], n_pairs: int = 50, seed: int = 0) -> list[tuple[int, int]]:
    """Up to ``n_pairs`` distinct (source, reference) index pairs from different families."""
    cands = [(i, j) for i in range(len(families)) for j in range(len(families))
             if families[i] != families[j]]
    if not cands:
        return []
    order = np.random.default_rng(seed).permutation(len(cands))[:n_pairs]
    return [cands[k] for k in order]


def timbre_swap_accuracy(gen: Generator, samples, families, n_pairs: int = 50, seed: int = 0) -> float | None:
    """Fraction of swapped pairs whose output embeds closer to the reference than the source."""
    pairs = swap_pairs(families, n_pairs, seed)
    if not pairs:
        return None
    outs = generate_split(gen, [samples[i] for i, _ in pairs], [samples[j] for _, j in pairs], seed=seed)
    wins = 0
    for (i, j), out in zip(pairs, outs):
        e = metrics.timbre_embedding(out)
        to_ref = metrics.cosine_similarity(e, metrics.timbre_embedding(samples[j].mel))
        to_src = metrics.cosine_similarity(e, metrics.timbre_embedding(samples[i].mel))
        wins += to_ref > to_src
    return wins / len(pairs)


@torch.no_grad()
def evaluate_split(gen: Generator, corpus: Corpus, split: str = "test", ablate: str | None = None,
                   seed: int = 0, tol_frames: int = 3) -> tuple[dict, list[np.ndarray]]:
    """Metrics over one split; returns the report body and the generated mels."""
    samples = corpus.subset(split)
    if not samples:
        raise InsufficientDataError(f"split {split!r} is empty")
    ab = () if ablate is None else (ablate,)
    outs = generate_split(gen, samples, seed=seed, ablate=ab)
    mcds, sims, hits, offsets = [], [], [], []
    for s, out in zip(samples, outs):
        mcds.append(metrics.mcd(s.mel, out))
        try:
            sims.append(metrics.timbre_similarity(out, s.mel))
        except metrics.UndefinedSimilarityError:
            sims.append(0.0)
        events = corpus.events(s.id)
        if events is not None:
            h, o = metrics.onset_alignment(out, events, tol_frames)
            hits.append(h)
            if not math.isnan(o):
                offsets.append(o)
    families = [corpus.family(s.id) for s in samples]
    swap = None
    if all(f is not None for f in families):
        swap = timbre_swap_accuracy(gen, samples, families, seed=seed)
    report = {
        "mcd": float(np.mean(mcds)),
        "timbre_sim": float(np.mean(sims)),
        "onset_hit_rate": float(np.mean(hits)) if hits else None,
        "mean_offset": float(np.mean(offsets)) if offsets else None,
        "timbre_swap_accuracy": swap,
        "split": split,
        "n_samples": len(samples),
        "ablate": ablate,
    }
    return {k: _nan_to_none(v) for k, v in report.items()}, outs
