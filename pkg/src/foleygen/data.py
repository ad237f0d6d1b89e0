"""Tensor files, WAV I/O, synthetic paired corpus and dataset splits.

Tensor file layout (little-endian)::

    0   4s   magic b"VSTF"
    4   u8   version (1)
    5   u8   dtype (1 = float32)
    6   u8   ndim (1..4)
    7   u8   pad (0)
    8   u64  payload size in bytes
    16  ndim x u32 dims
    ..  row-major float32 payload
"""
from __future__ import annotations

import json
import math
import struct
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from foleygen import dsp
from foleygen.config import ModelConfig, config_to_dict
from foleygen.errors import DataError, FormatError, InsufficientDataError, InvalidAudioError

MAGIC = b"VSTF"
VERSION = 1
DTYPE_FLOAT32 = 1
HEADER = struct.Struct("<4sBBBBQ")
MAX_NDIM = 4


# --------------------------------------------------------------------------
# tensor format


def encode_tensor(array) -> bytes:
    a = np.ascontiguousarray(array, dtype="<f4")
    if not 1 <= a.ndim <= MAX_NDIM:
        raise FormatError(f"tensor ndim must be 1..{MAX_NDIM}, got {a.ndim}")
    payload = a.tobytes()
    dims = struct.pack(f"<{a.ndim}I", *a.shape)
    return HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, a.ndim, 0, len(payload)) + dims + payload


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns ``(array, end_offset)``."""
    if len(buf) - offset < HEADER.size:
        raise FormatError("truncated tensor header", offset)
    magic, version, dtype, ndim, _pad, nbytes = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected magic 'VSTF'", offset)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}", offset + 4)
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f"unsupported dtype code {dtype}", offset + 5)
    if not 1 <= ndim <= MAX_NDIM:
        raise FormatError(f"bad ndim {ndim}", offset + 6)
    pos = offset + HEADER.size
    if len(buf) - pos < 4 * ndim:
        raise FormatError("truncated dims", pos)
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    expected = 4 * math.prod(shape)
    if nbytes != expected:
        raise FormatError(f"payload size {nbytes} does not match dims {shape}", offset + 8)
    if len(buf) - pos < expected:
        raise FormatError(f"truncated payload: need {expected} bytes", pos)
    array = np.frombuffer(buf, dtype="<f4", count=math.prod(shape), offset=pos).reshape(shape)
    return array.astype(np.float32), pos + expected


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read tensor {path}: {exc}") from exc
    array, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor", end)
    return array


# --------------------------------------------------------------------------
# WAV


def write_wav(path, samples, sample_rate: int) -> None:
    pcm = np.round(np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32767.0)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.astype("<i2").tobytes())


def read_wav(path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Read 16-bit mono PCM; other formats and mismatched rates are rejected."""
    try:
        fh = wave.open(str(path), "rb")
    except FileNotFoundError as exc:
        raise DataError(f"audio file not found: {path}") from exc
    except (wave.Error, EOFError) as exc:
        raise InvalidAudioError(f"{path}: not a PCM WAV file ({exc})") from exc
    with fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise InvalidAudioError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    if expected_rate is not None and rate != expected_rate:
        raise InvalidAudioError(f"{path}: sample rate {rate} Hz rejected; expected {expected_rate} Hz")
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32767.0, rate


# --------------------------------------------------------------------------
# samples


@dataclass
class PairedSample:
    video: np.ndarray  # (T_v, D_v)
    mel: np.ndarray  # (4 T_v, n_mels)
    id: str
    category: str = ""

    def __post_init__(self):
        if self.mel.shape[0] != 4 * self.video.shape[0]:
            raise DataError(f"sample {self.id}: mel has {self.mel.shape[0]} frames, "
                            f"expected 4 x {self.video.shape[0]}")


@dataclass(frozen=True)
class TimbreParams:
    f0: float
    harmonic_amps: tuple[float, ...]
    decay: float


@dataclass
class SyntheticSample:
    pair: PairedSample
    audio: np.ndarray
    event_times: list[int]
    timbre_params: TimbreParams
    noise_floor: float
    family: int = 0

    def activation(self) -> np.ndarray:
        return event_activation(self.event_times, self.pair.video.shape[0])


@dataclass
class SplitManifest:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)


# Two well-separated timbre families; per-sample jitter is applied on top.
FAMILIES = (
    TimbreParams(f0=220.0, harmonic_amps=(0.5, 0.3, 0.15, 0.05), decay=30.0),
    TimbreParams(f0=1100.0, harmonic_amps=(0.15, 0.25, 0.6), decay=20.0),
)
TRIANGLE = np.array([1 / 3, 2 / 3, 1.0, 2 / 3, 1 / 3])
PROJECTION_SEED = 20221115
LATENT_DIM = 3


def event_activation(event_times, n_frames: int) -> np.ndarray:
    """Impulse train at the event frames convolved with a centered triangle."""
    impulses = np.zeros(n_frames)
    impulses[np.asarray(event_times, dtype=int)] = 1.0
    return np.convolve(impulses, TRIANGLE, mode="same")


def feature_projection(video_dim: int) -> np.ndarray:
    """Fixed ``(LATENT_DIM, video_dim)`` matrix with orthonormal rows."""
    g = np.random.default_rng(PROJECTION_SEED).standard_normal((max(video_dim, LATENT_DIM), LATENT_DIM))
    q, _ = np.linalg.qr(g)
    return q[:video_dim, :LATENT_DIM].T * math.sqrt(video_dim / LATENT_DIM)


def render_audio(event_times, params: TimbreParams, cfg: ModelConfig, noise_floor: float,
                 rng: np.random.Generator, gains=None) -> np.ndarray:
    n = cfg.mel_frames * cfg.hop_size
    t = np.arange(n) / cfg.sample_rate
    audio = np.zeros(n)
    gains = np.ones(len(event_times)) if gains is None else gains
    for ev, gain in zip(event_times, gains):
        start = ev * 4 * cfg.hop_size
        tau = t[start:] - t[start]
        tone = np.zeros_like(tau)
        for h, amp in enumerate(params.harmonic_amps):
            freq = params.f0 * (h + 1)
            if freq < cfg.sample_rate / 2:
                tone += amp * np.sin(2 * np.pi * freq * tau)
        audio[start:] += 0.6 * gain * np.exp(-params.decay * tau) * tone
    if noise_floor > 0:
        audio += rng.normal(0.0, noise_floor, size=n)
    return np.clip(audio, -1.0, 1.0)


def _draw_events(rng: np.random.Generator, n_frames: int, max_events: int, min_gap: int) -> list[int]:
    count = int(rng.integers(1, max_events + 1))
    events: list[int] = []
    candidates = np.arange(2, n_frames - 4)
    for pos in rng.permutation(candidates):
        if all(abs(pos - e) >= min_gap for e in events):
            events.append(int(pos))
        if len(events) == count:
            break
    return sorted(events)


def synthesize_sample(cfg: ModelConfig, seed: int, family: int | None = None,
                      event_times: list[int] | None = None, timbre: TimbreParams | None = None,
                      noise_floor: float | None = None, feature_noise: float = 0.01,
                      sample_id: str | None = None) -> SyntheticSample:
    """Render one paired synthetic sample with known events and timbre.

    Anything not pinned by argument is drawn from ``seed``.
    """
    rng = np.random.default_rng(seed)
    t_v = cfg.video_frames
    family = int(rng.integers(len(FAMILIES))) if family is None else family
    if timbre is None:
        base = FAMILIES[family]
        amps = np.asarray(base.harmonic_amps) * rng.uniform(0.85, 1.15, len(base.harmonic_amps))
        timbre = TimbreParams(f0=float(base.f0 * rng.uniform(0.97, 1.03)),
                              harmonic_amps=tuple(float(a) for a in amps / amps.sum()),
                              decay=float(base.decay * rng.uniform(0.9, 1.1)))
    if event_times is None:
        max_events = max(1, min(3, t_v // 12))
        event_times = _draw_events(rng, t_v, max_events, min_gap=max(3, t_v // 6))
    gains = rng.uniform(0.7, 1.0, size=len(event_times))
    if noise_floor is None:
        noise_floor = float(rng.uniform(1e-4, 4e-4))
    audio = render_audio(event_times, timbre, cfg, noise_floor, rng, gains)
    mel = dsp.extract_mel(audio, cfg)

    act = event_activation(event_times, t_v)
    latent = np.stack([act, act ** 2, np.gradient(act)], axis=1)
    video = latent @ feature_projection(cfg.video_dim)
    video = video + feature_noise * rng.standard_normal(video.shape)
    sid = sample_id if sample_id is not None else f"s{seed:06d}"
    pair = PairedSample(video=video.astype(np.float32), mel=mel, id=sid, category=f"family{family}")
    return SyntheticSample(pair=pair, audio=audio.astype(np.float32), event_times=list(event_times),
                           timbre_params=timbre, noise_floor=noise_floor, family=family)


def synthesize_corpus(cfg: ModelConfig, n: int, seed: int = 0, n_families: int = 2,
                      noise_floor: float | None = None) -> list[SyntheticSample]:
    """``n`` samples with families assigned round-robin; sample ``i`` uses seed ``[seed, i]``."""
    out = []
    for i in range(n):
        sub = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        out.append(synthesize_sample(cfg, sub, family=i % n_families, noise_floor=noise_floor,
                                     sample_id=f"s{i:05d}"))
    return out


def make_splits(ids, seed: int = 0, val: int = 32, test: int = 32) -> SplitManifest:
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate sample ids")
    if len(ids) < val + test + 1:
        raise InsufficientDataError(f"{len(ids)} ids cannot fill {val} val + {test} test + 1 train")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return SplitManifest(train=shuffled[val + test:], val=shuffled[:val], test=shuffled[val:val + test])


# --------------------------------------------------------------------------
# corpus on disk


def write_corpus(root, samples: list[SyntheticSample], cfg: ModelConfig, splits: SplitManifest) -> Path:
    """Write sample dirs, ``manifest.json`` and ``splits.json`` under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        d = root / "samples" / s.pair.id
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "video.vstf", s.pair.video)
        write_tensor(d / "mel.vstf", s.pair.mel)
        write_wav(d / "audio.wav", s.audio, cfg.sample_rate)
        entries.append({
            "id": s.pair.id,
            "category": s.pair.category,
            "video": f"samples/{s.pair.id}/video.vstf",
            "mel": f"samples/{s.pair.id}/mel.vstf",
            "audio": f"samples/{s.pair.id}/audio.wav",
            "ground_truth": {
                "family": s.family,
                "event_times": s.event_times,
                "timbre_params": asdict(s.timbre_params),
                "noise_floor": s.noise_floor,
            },
        })
    manifest = {"version": 1, "data_hash": cfg.data_hash(), "config": config_to_dict(cfg), "samples": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (root / "splits.json").write_text(json.dumps(asdict(splits), indent=1) + "\n")
    return root


@dataclass
class Corpus:
    root: Path
    manifest: dict
    splits: SplitManifest
    samples: dict[str, PairedSample]

    def entry(self, sid: str) -> dict:
        return self._entries[sid]

    def __post_init__(self):
        self._entries = {e["id"]: e for e in self.manifest["samples"]}

    def subset(self, split: str) -> list[PairedSample]:
        ids = getattr(self.splits, split)
        return [self.samples[i] for i in ids]

    def events(self, sid: str) -> list[int] | None:
        gt = self._entries[sid].get("ground_truth")
        return None if gt is None else list(gt["event_times"])

    def family(self, sid: str) -> int | None:
        gt = self._entries[sid].get("ground_truth")
        return None if gt is None else int(gt["family"])


def load_corpus(root, cfg: ModelConfig | None = None) -> Corpus:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no manifest.json under {root}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest: {exc}") from exc
    try:
        splits = SplitManifest(**json.loads((root / "splits.json").read_text()))
    except FileNotFoundError:
        splits = SplitManifest(train=[e["id"] for e in manifest["samples"]])
    samples = {}
    for e in manifest["samples"]:
        video = read_tensor(root / e["video"])
        mel = read_tensor(root / e["mel"])
        if cfg is not None and (video.shape[1] != cfg.video_dim or mel.shape[1] != cfg.n_mels):
            raise DataError(f"sample {e['id']}: shapes {video.shape}/{mel.shape} do not match config")
        samples[e["id"]] = PairedSample(video=video, mel=mel, id=e["id"], category=e.get("category", ""))
    return Corpus(root=root, manifest=manifest, splits=splits, samples=samples)
