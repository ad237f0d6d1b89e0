"""Generator (three encoders + mel decoder) and the two discriminators.

Public tensors are batch-first and time-major: mels ``(B, T_m, n_mels)``,
video features ``(B, T_v, D_v)``.  Convolutions run channel-first internally.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from foleygen import dsp
from foleygen.config import ModelConfig, ResampleSpec
from foleygen.errors import DegenerateInputError, ShapeError

# Fixed affine map of log-mel values into a unit-ish range before any layer sees them.
MEL_SHIFT = 5.0
MEL_SCALE = 5.0


def normalize_mel(m: torch.Tensor) -> torch.Tensor:
    return (m + MEL_SHIFT) / MEL_SCALE


def denormalize_mel(m: torch.Tensor) -> torch.Tensor:
    return m * MEL_SCALE - MEL_SHIFT


def conv1d(c_in: int, c_out: int, kernel: int, **kwargs) -> nn.Conv1d:
    kwargs.setdefault("padding", (kernel - 1) // 2)
    return nn.Conv1d(c_in, c_out, kernel, **kwargs)


FORGET_BIAS = 3.0


def _init_lstm(lstm: nn.LSTM, forget_bias: float = FORGET_BIAS) -> None:
    """Orthogonal recurrent blocks; a positive forget-gate bias so the final
    hidden state can carry information across long quiet stretches."""
    for name, p in lstm.named_parameters():
        if name.startswith("weight_hh"):
            for block in p.data.chunk(4, dim=0):
                nn.init.orthogonal_(block)
        elif name.startswith("bias_ih"):
            n = p.shape[0] // 4
            p.data[n:2 * n] = forget_bias


def last_hidden(lstm: nn.LSTM, x: torch.Tensor) -> torch.Tensor:
    """Top-layer final forward hidden concatenated with final backward hidden."""
    _, (h_n, _) = lstm(x)
    return torch.cat([h_n[-2], h_n[-1]], dim=-1)


def resample_batch(x: torch.Tensor, spec: ResampleSpec, rng: np.random.Generator | None) -> torch.Tensor:
    """Random resampling along the last (time) axis of ``(B, C, T)``, one draw per item.

    ``rng=None`` is the identity transform.
    """
    if rng is None:
        return x
    batch, _, n_frames = x.shape
    plans = [dsp.resample_plan(n_frames, *dsp.draw_resample(n_frames, spec, rng)) for _ in range(batch)]
    lo = torch.as_tensor(np.stack([p[0] for p in plans]), device=x.device)
    hi = torch.as_tensor(np.stack([p[1] for p in plans]), device=x.device)
    frac = torch.as_tensor(np.stack([p[2] for p in plans]), dtype=x.dtype, device=x.device)
    lo = lo[:, None, :].expand_as(x)
    hi = hi[:, None, :].expand_as(x)
    frac = frac[:, None, :]
    return x.gather(2, lo) * (1 - frac) + x.gather(2, hi) * frac


class TemporalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.video_dim = cfg.video_dim
        layers = []
        c_in = cfg.video_dim
        for _ in range(cfg.te_conv_layers):
            layers += [conv1d(c_in, cfg.te_conv_channels, cfg.te_conv_kernel),
                       nn.BatchNorm1d(cfg.te_conv_channels),
                       nn.LeakyReLU(cfg.leaky_slope)]
            c_in = cfg.te_conv_channels
        self.convs = nn.Sequential(*layers)
        self.lstm = nn.LSTM(cfg.te_conv_channels, cfg.te_lstm_hidden, cfg.te_lstm_layers,
                            batch_first=True, bidirectional=True)
        _init_lstm(self.lstm)
        self.bottleneck = nn.Linear(2 * cfg.te_lstm_hidden, cfg.te_out_dim)

    def conv_features(self, v: torch.Tensor) -> torch.Tensor:
        if v.shape[-1] != self.video_dim:
            raise ShapeError(f"video feature width {v.shape[-1]} != configured {self.video_dim}")
        return self.convs(v.transpose(1, 2))

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        h = self.conv_features(v).transpose(1, 2)
        out, _ = self.lstm(h)
        return self.bottleneck(out)


class SGAU(nn.Module):
    """Self-gated acoustic unit.

    feature out   = R[tanh(skip(c) + in(x)) * sigmoid(out(c) + in(x))]
    condition out = R[skip(c)]
    """

    def __init__(self, channels: int, input_kernels=(5, 7), output_kernel: int = 3,
                 skip_kernel: int = 5, groups: int = 8, norm: bool = True):
        super().__init__()
        k1, k2 = input_kernels
        self.input_gate = nn.Sequential(conv1d(channels, channels, k1), conv1d(channels, channels, k2))
        self.output_gate = conv1d(channels, channels, output_kernel)
        self.skip_gate = conv1d(channels, channels, skip_kernel)
        if norm:
            self.input_norm = nn.InstanceNorm1d(channels, affine=True)
            self.output_norm = nn.GroupNorm(groups, channels)
            self.skip_norm = nn.GroupNorm(groups, channels)
        else:
            self.input_norm = self.output_norm = self.skip_norm = nn.Identity()

    def forward(self, x, c, spec: ResampleSpec | None = None, rng: np.random.Generator | None = None):
        if x.shape != c.shape:
            raise ShapeError(f"feature input {tuple(x.shape)} and condition input {tuple(c.shape)} differ")
        v = self.input_norm(self.input_gate(x))
        s = self.skip_norm(self.skip_gate(c))
        o = self.output_norm(self.output_gate(c))
        x_o = torch.tanh(s + v) * torch.sigmoid(o + v)
        if rng is not None:
            x_o = resample_batch(x_o, spec, rng)
            s = resample_batch(s, spec, rng)
        return x_o, s


class AcousticEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.spec = cfg.resample_spec()
        self.proj = conv1d(cfg.n_mels, cfg.sgau_channels, 1)
        self.units = nn.ModuleList(
            SGAU(cfg.sgau_channels, cfg.sgau_input_kernels, cfg.sgau_output_kernel,
                 cfg.sgau_skip_kernel, cfg.sgau_groups)
            for _ in range(cfg.sgau_layers))
        self.lstm = nn.LSTM(cfg.sgau_channels, cfg.ae_lstm_hidden, cfg.ae_lstm_layers,
                            batch_first=True, bidirectional=True)
        _init_lstm(self.lstm)
        # Standardizes each code dimension over the corpus.  Without it the
        # final hidden state starts out nearly identical for every reference
        # and the decoder learns to ignore it.
        self.norm = nn.BatchNorm1d(cfg.timbre_dim, affine=False)

    def forward(self, m: torch.Tensor, rng: np.random.Generator | None = None) -> torch.Tensor:
        if m.shape[1] < self.spec.segment_count_range[0]:
            raise DegenerateInputError(f"reference mel has only {m.shape[1]} frames")
        x = c = self.proj(normalize_mel(m).transpose(1, 2))
        for unit in self.units:
            x, c = unit(x, c, self.spec, rng)
        h = last_hidden(self.lstm, x.transpose(1, 2))
        # a single-item batch has no batch statistics; fall back to the running ones
        batch_stats = self.training and h.shape[0] > 1
        return F.batch_norm(h, self.norm.running_mean, self.norm.running_var,
                            training=batch_stats, momentum=self.norm.momentum, eps=self.norm.eps)


class BackgroundEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.floor = cfg.mel_floor
        self.lstm = nn.LSTM(cfg.n_mels, cfg.be_lstm_hidden, cfg.be_lstm_layers,
                            batch_first=True, bidirectional=True)
        _init_lstm(self.lstm)
        self.reduce = nn.Linear(2 * cfg.be_lstm_hidden, cfg.bg_dim)

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        if m.shape[1] < 1:
            raise DegenerateInputError("background mel has no frames")
        masked = torch.as_tensor(dsp.energy_mask(m.detach().cpu().numpy(), self.floor),
                                 dtype=m.dtype, device=m.device)
        return self.reduce(last_hidden(self.lstm, normalize_mel(masked)))


def sinusoid_table(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return table.to(dtype)


class FFTBlock(nn.Module):
    """Self-attention and a two-layer 1-D conv net, each with residual + layer norm."""

    def __init__(self, hidden: int, heads: int, conv_channels: int, kernel: int, dropout: float):
        super().__init__()
        self.attn = nn.MultiheadAttention(hidden, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(hidden)
        self.conv1 = conv1d(hidden, conv_channels, kernel)
        self.conv2 = conv1d(conv_channels, hidden, 1)
        self.norm2 = nn.LayerNorm(hidden)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        a, _ = self.attn(x, x, x, need_weights=False)
        x = self.norm1(x + self.dropout(a))
        h = self.conv2(F.relu(self.conv1(x.transpose(1, 2)))).transpose(1, 2)
        return self.norm2(x + self.dropout(h))


class MelDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c_in = cfg.te_out_dim + cfg.timbre_dim + cfg.bg_dim
        ups = []
        for _ in range(cfg.dec_convt_layers):
            ups += [nn.ConvTranspose1d(c_in, cfg.dec_convt_channels, cfg.dec_convt_kernel,
                                       stride=cfg.dec_convt_stride,
                                       padding=(cfg.dec_convt_kernel - cfg.dec_convt_stride) // 2),
                    nn.LeakyReLU(cfg.leaky_slope)]
            c_in = cfg.dec_convt_channels
        self.upsample = nn.Sequential(*ups)
        self.to_hidden = nn.Linear(cfg.dec_convt_channels, cfg.fft_hidden)
        self.blocks = nn.ModuleList(
            FFTBlock(cfg.fft_hidden, cfg.fft_heads, cfg.fft_conv_channels, cfg.fft_conv_kernel, cfg.dropout)
            for _ in range(cfg.fft_blocks))
        self.out = nn.Linear(cfg.fft_hidden, cfg.n_mels)
        nn.init.zeros_(self.out.bias)

    def forward(self, t: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if not t.shape[:2] == a.shape[:2] == b.shape[:2]:
            raise ShapeError(f"code lengths differ: {tuple(t.shape)}, {tuple(a.shape)}, {tuple(b.shape)}")
        h = torch.cat([t, a, b], dim=-1).transpose(1, 2)
        h = self.to_hidden(self.upsample(h).transpose(1, 2))
        h = h + sinusoid_table(h.shape[1], h.shape[2], h.dtype).to(h.device)
        for block in self.blocks:
            h = block(h)
        return denormalize_mel(self.out(h))


ABLATIONS = ("no-temporal", "no-timbre", "no-background", "identity-R")


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.temporal = TemporalEncoder(cfg)
        self.acoustic = AcousticEncoder(cfg)
        self.background = BackgroundEncoder(cfg)
        self.decoder = MelDecoder(cfg)

    def encode(self, video, ref_mel, bg_mel, rng=None, ablate=()) -> dict[str, torch.Tensor]:
        """Disentangled codes, each expanded to ``(B, T_v, dim)``."""
        unknown = set(ablate) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation(s) {sorted(unknown)}")
        t = self.temporal(video)
        steps = t.shape[1]
        a = self.acoustic(ref_mel, None if "identity-R" in ablate else rng)
        b = self.background(bg_mel)
        a = a[:, None, :].expand(-1, steps, -1)
        b = b[:, None, :].expand(-1, steps, -1)
        if "no-temporal" in ablate:
            t = torch.zeros_like(t)
        if "no-timbre" in ablate:
            a = torch.zeros_like(a)
        if "no-background" in ablate:
            b = torch.zeros_like(b)
        return {"temporal": t, "timbre": a, "background": b}

    def forward(self, video, ref_mel, bg_mel, rng=None, ablate=()) -> torch.Tensor:
        codes = self.encode(video, ref_mel, bg_mel, rng, ablate)
        return self.decoder(codes["temporal"], codes["timbre"], codes["background"])

    def generate(self, video, m_ref, m_bg=None, rng=None, mode="train", ablate=()):
        """``train``: background sees the target; ``infer``: background sees silence."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if mode == "infer":
            m_bg = torch.full((video.shape[0], 4 * video.shape[1], self.cfg.n_mels),
                              math.log(self.cfg.mel_floor), dtype=video.dtype, device=video.device)
        elif m_bg is None:
            m_bg = m_ref
        return self(video, m_ref, m_bg, rng, ablate)


class TimeAlignmentDiscriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        slope = cfg.leaky_slope
        self.video_dim = cfg.video_dim
        self.upsample = nn.Sequential(
            nn.ConvTranspose1d(cfg.video_dim, cfg.tdad_convt_channels, 4, stride=2, padding=1),
            nn.LeakyReLU(slope),
            nn.ConvTranspose1d(cfg.tdad_convt_channels, cfg.tdad_convt_channels, 4, stride=2, padding=1),
            nn.LeakyReLU(slope),
        )
        self.mel_conv = conv1d(cfg.n_mels, cfg.tdad_conv_channels, cfg.tdad_mel_kernel)
        layers = []
        c_in = cfg.tdad_convt_channels + cfg.tdad_conv_channels
        k = cfg.tdad_conv_kernel
        for _ in range(cfg.tdad_conv_layers - 1):
            layers += [nn.Conv1d(c_in, cfg.tdad_conv_channels, k, stride=2, padding=(k - 1) // 2),
                       nn.BatchNorm1d(cfg.tdad_conv_channels),
                       nn.LeakyReLU(slope)]
            c_in = cfg.tdad_conv_channels
        layers.append(nn.Conv1d(c_in, 1, k, stride=1, padding=(k - 1) // 2))
        self.body = nn.Sequential(*layers)

    def forward(self, m: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        if m.shape[1] != 4 * v.shape[1]:
            raise ShapeError(f"mel length {m.shape[1]} != 4 x video length {v.shape[1]}")
        if v.shape[-1] != self.video_dim:
            raise ShapeError(f"video feature width {v.shape[-1]} != configured {self.video_dim}")
        cond = self.upsample(v.transpose(1, 2))
        h = self.mel_conv(normalize_mel(m).transpose(1, 2))
        return torch.sigmoid(self.body(torch.cat([h, cond], dim=1))).squeeze(1)


class _SubMelDiscriminator(nn.Module):
    def __init__(self, channels: int, slope: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, channels, 3, stride=2, padding=1), nn.LeakyReLU(slope),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1), nn.LeakyReLU(slope),
            nn.Conv2d(channels, 1, 3, stride=1, padding=1),
        )

    def forward(self, m):
        return torch.sigmoid(self.net(m[:, None])).squeeze(1)


class MultiWindowMelDiscriminator(nn.Module):
    """Three 2-D conv sub-discriminators over random windows of the mel.

    For a window of ``L`` frames over ``n_mels`` bins the score map has shape
    ``(ceil(ceil(L / 2) / 2), ceil(ceil(n_mels / 2) / 2))``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fractions = tuple(cfg.mwmd_windows)
        self.subs = nn.ModuleList(_SubMelDiscriminator(cfg.mwmd_channels, cfg.leaky_slope)
                                  for _ in self.fractions)

    def window_lengths(self, n_frames: int) -> list[int]:
        return [max(1, int(n_frames * f)) for f in self.fractions]

    def forward(self, m: torch.Tensor, rng: np.random.Generator | None = None) -> list[torch.Tensor]:
        n_frames = m.shape[1]
        lengths = self.window_lengths(n_frames)
        if n_frames < 4 * 4 or min(lengths) < 4:
            raise DegenerateInputError(f"mel with {n_frames} frames is too short for the mel discriminator")
        x = normalize_mel(m)
        scores = []
        for length, sub in zip(lengths, self.subs):
            start = 0 if rng is None else int(rng.integers(0, n_frames - length + 1))
            scores.append(sub(x[:, start:start + length]))
        return scores


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
