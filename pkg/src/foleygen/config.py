"""Model/training configuration, presets and the key = value config file.

The config file is a TOML subset: ``[model]``, ``[train]`` and ``[paths]``
tables holding scalars or flat arrays.  It is read with ``tomli`` and written
by :func:`dump_toml`, which only emits that subset.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli

from foleygen.errors import ConfigError


@dataclass(frozen=True)
class ResampleSpec:
    """Parameters of the random resampling transform."""

    seed: int = 0
    segment_count_range: tuple[int, int] = (2, 8)
    stretch_range: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        k_min, k_max = self.segment_count_range
        lo, hi = self.stretch_range
        if k_min < 1 or k_max < k_min:
            raise ConfigError(f"bad segment_count_range {self.segment_count_range}")
        if not 0 < lo <= hi:
            raise ConfigError(f"bad stretch_range {self.stretch_range}")


@dataclass(frozen=True)
class ModelConfig:
    # audio front end
    sample_rate: int = 22050
    n_fft: int = 1024
    hop_size: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    mel_floor: float = 1e-5
    # paired timebase
    video_frames: int = 215
    video_dim: int = 2048
    fps: float = 21.5
    # temporal encoder
    te_conv_layers: int = 8
    te_conv_kernel: int = 5
    te_conv_channels: int = 512
    te_lstm_layers: int = 2
    te_lstm_hidden: int = 256
    te_out_dim: int = 8
    # acoustic encoder
    sgau_layers: int = 5
    sgau_channels: int = 512
    sgau_input_kernels: tuple[int, int] = (5, 7)
    sgau_output_kernel: int = 3
    sgau_skip_kernel: int = 5
    sgau_groups: int = 8
    ae_lstm_layers: int = 2
    ae_lstm_hidden: int = 256
    resample_segments: tuple[int, int] = (2, 8)
    resample_stretch: tuple[float, float] = (0.5, 1.5)
    # background encoder
    be_lstm_layers: int = 2
    be_lstm_hidden: int = 128
    bg_dim: int = 64
    # mel decoder
    dec_convt_layers: int = 2
    dec_convt_kernel: int = 4
    dec_convt_stride: int = 2
    dec_convt_channels: int = 1024
    fft_blocks: int = 4
    fft_hidden: int = 512
    fft_heads: int = 2
    fft_conv_kernel: int = 9
    fft_conv_channels: int = 512
    dropout: float = 0.1
    # time-domain alignment discriminator
    tdad_convt_channels: int = 1024
    tdad_mel_kernel: int = 3
    tdad_conv_layers: int = 4
    tdad_conv_kernel: int = 4
    tdad_conv_channels: int = 512
    # multi-window mel discriminator
    mwmd_windows: tuple[float, ...] = (1.0, 0.5, 0.25)
    mwmd_channels: int = 128
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.video_frames < 1 or self.video_dim < 1 or self.n_mels < 1:
            raise ConfigError("dimensions must be positive")
        if self.sample_rate <= 0 or self.hop_size <= 0 or self.n_fft < self.hop_size:
            raise ConfigError("bad STFT parameters")
        if self.dec_convt_stride ** self.dec_convt_layers != 4:
            raise ConfigError("decoder upsampling must be exactly 4x")
        if self.sgau_channels % self.sgau_groups:
            raise ConfigError("sgau_channels must be divisible by sgau_groups")
        if self.fft_hidden % self.fft_heads:
            raise ConfigError("fft_hidden must be divisible by fft_heads")
        if len(self.mwmd_windows) != 3:
            raise ConfigError("exactly three mel discriminator windows are required")
        ResampleSpec(0, self.resample_segments, self.resample_stretch)

    @property
    def mel_frames(self) -> int:
        return 4 * self.video_frames

    @property
    def timbre_dim(self) -> int:
        return 2 * self.ae_lstm_hidden

    def resample_spec(self, seed: int = 0) -> ResampleSpec:
        return ResampleSpec(seed, tuple(self.resample_segments), tuple(self.resample_stretch))

    def data_hash(self) -> str:
        """Hash of the fields that fix tensor shapes on disk."""
        keys = ("sample_rate", "n_fft", "hop_size", "n_mels", "fmin", "fmax",
                "mel_floor", "video_frames", "video_dim")
        return _hash({k: getattr(self, k) for k in keys})


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 48
    epochs: int = 500
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 0
    decay_start: float = 0.5
    lambda_m: float = 10000.0
    lambda_a: float = 1.0
    seed: int = 0
    shift_target: str = "real"  # "real" (prose reading) or "fake" (S applied to m_hat)
    identity_resample: bool = False
    resample_warmup: int = 0  # steps trained with identity resampling before it switches on
    use_tdad: bool = True
    use_mwmd: bool = True
    val_every: int = 1
    ckpt_every: int = 10
    val_size: int = 32
    test_size: int = 32

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.lambda_m < 0 or self.lambda_a < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.shift_target not in ("real", "fake"):
            raise ConfigError(f"shift_target must be 'real' or 'fake', got {self.shift_target!r}")
        if self.resample_warmup < 0:
            raise ConfigError("resample_warmup must be >= 0")
        if not 0.0 <= self.decay_start <= 1.0:
            raise ConfigError("decay_start must lie in [0, 1]")


PAPER_MODEL = ModelConfig()

DESK_MODEL = ModelConfig(
    video_frames=54,
    video_dim=64,
    te_conv_channels=64,
    te_lstm_hidden=32,
    sgau_channels=32,
    ae_lstm_hidden=32,
    be_lstm_hidden=16,
    bg_dim=8,
    dec_convt_channels=128,
    fft_hidden=64,
    fft_conv_channels=128,
    tdad_convt_channels=64,
    tdad_conv_channels=64,
    mwmd_channels=8,
)

PAPER_TRAIN = TrainConfig()
DESK_TRAIN = TrainConfig(batch_size=8, epochs=50, lr=1e-3, resample_warmup=800, val_size=2, test_size=2,
                         ckpt_every=10)
OVERFIT_TRAIN = dataclasses.replace(DESK_TRAIN, epochs=2000, val_every=0, ckpt_every=0, val_size=0, test_size=0)

PRESETS = {
    "paper": (PAPER_MODEL, PAPER_TRAIN),
    "desk": (DESK_MODEL, DESK_TRAIN),
    "overfit": (DESK_MODEL, OVERFIT_TRAIN),
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: DESK_MODEL)
    train: TrainConfig = field(default_factory=lambda: DESK_TRAIN)
    paths: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"model": config_to_dict(self.model), "train": config_to_dict(self.train),
                "paths": dict(self.paths)}

    def config_hash(self) -> str:
        return _hash({"model": config_to_dict(self.model), "train": config_to_dict(self.train)})


def config_to_dict(cfg) -> dict[str, Any]:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def config_from_dict(cls, data: dict[str, Any]):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name in known else None
        if isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{cls.__name__}.{name} must be a boolean")
        elif isinstance(default, float) and isinstance(value, int):
            value = float(value)
        elif default is not None and not isinstance(value, type(default)):
            raise ConfigError(f"{cls.__name__}.{name}: expected {type(default).__name__}, "
                              f"got {value!r}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _parse_override(text: str) -> tuple[str, str, Any]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    section, name = key.strip().split(".", 1)
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return section, name, value


def load_run_config(path: str | os.PathLike | None = None, preset: str = "desk",
                    overrides: list[str] = ()) -> RunConfig:
    """Build a validated RunConfig from a preset, an optional file and overrides.

    ``VS_SEED`` in the environment wins over any configured seed.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    model_cfg, train_cfg = PRESETS[preset]
    tree = {"model": config_to_dict(model_cfg), "train": config_to_dict(train_cfg), "paths": {}}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            loaded = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"bad config file {path}: {exc}") from exc
        for section, values in loaded.items():
            if section not in tree or not isinstance(values, dict):
                raise ConfigError(f"unknown config section [{section}]")
            tree[section].update(values)
    for text in overrides:
        section, name, value = _parse_override(text)
        if section not in tree:
            raise ConfigError(f"unknown config section [{section}]")
        tree[section][name] = value
    if os.environ.get("VS_SEED"):
        try:
            tree["train"]["seed"] = int(os.environ["VS_SEED"])
        except ValueError as exc:
            raise ConfigError(f"VS_SEED must be an integer, got {os.environ['VS_SEED']!r}") from exc
    return RunConfig(model=config_from_dict(ModelConfig, tree["model"]),
                     train=config_from_dict(TrainConfig, tree["train"]),
                     paths={k: str(v) for k, v in tree["paths"].items()})


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {value!r}")


def dump_toml(tree: dict[str, dict[str, Any]]) -> str:
    lines = []
    for section, values in tree.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in values.items())
        lines.append("")
    return "\n".join(lines)
