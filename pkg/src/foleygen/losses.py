"""Training objectives.

Every ``||.||_2`` term is realized as a mean squared error over score-map
positions, and the mel L1 term as a mean absolute error, so the loss weights
stay meaningful across desk and full-size shapes.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from foleygen.errors import ShapeError

METRICS_HEADER = ("step", "l_mel", "l_adv", "l_dt", "l_dm", "l_g_total")


@dataclass(frozen=True)
class LossWeights:
    lambda_m: float = 10000.0
    lambda_a: float = 1.0

    def __post_init__(self):
        if self.lambda_m < 0 or self.lambda_a < 0:
            raise ValueError("loss weights must be nonnegative")


def _check_same(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _toward_one(scores: torch.Tensor) -> torch.Tensor:
    return ((1.0 - scores) ** 2).mean()


def _toward_zero(scores: torch.Tensor) -> torch.Tensor:
    return (scores ** 2).mean()


def _check_windows(scores) -> None:
    if len(scores) != 3:
        raise ValueError(f"expected 3 mel-discriminator score maps, got {len(scores)}")


def mel_l1(m_hat: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    _check_same(m_hat, m)
    return (m_hat - m).abs().mean()


def adv_generator_loss(d_t_scores: torch.Tensor | None, d_m_scores) -> torch.Tensor:
    """Least-squares generator objective against both discriminators.

    Either term may be disabled by passing ``None`` (discriminator ablation).
    """
    total = 0.0
    if d_t_scores is not None:
        total = total + _toward_one(d_t_scores)
    if d_m_scores is not None:
        _check_windows(d_m_scores)
        total = total + sum(_toward_one(s) for s in d_m_scores) / 3
    return torch.as_tensor(total) if not torch.is_tensor(total) else total


def tdad_loss(real: torch.Tensor, fake: torch.Tensor, shifted: torch.Tensor) -> torch.Tensor:
    """Aligned real pairs toward 1; generated and time-shifted pairs toward 0."""
    _check_same(real, fake)
    _check_same(real, shifted)
    return _toward_one(real) + _toward_zero(fake) + _toward_zero(shifted)


def mwmd_loss(real_scores, fake_scores) -> torch.Tensor:
    _check_windows(real_scores)
    _check_windows(fake_scores)
    terms = []
    for r, f in zip(real_scores, fake_scores):
        _check_same(r, f)
        terms.append(_toward_one(r) + _toward_zero(f))
    return sum(terms) / 3


def generator_total(l_mel, l_adv, w: LossWeights = LossWeights()):
    return w.lambda_m * l_mel + w.lambda_a * l_adv
