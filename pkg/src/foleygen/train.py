"""Alternating adversarial training, checkpoint/resume, and inference."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from foleygen import checkpoint as ckpt_io
from foleygen import losses
from foleygen.config import ModelConfig, RunConfig, TrainConfig, config_from_dict
from foleygen.data import Corpus, PairedSample
from foleygen.dsp import draw_shift
from foleygen.errors import ConfigError, DivergenceError, FormatError, InsufficientDataError
from foleygen.model import Generator, MultiWindowMelDiscriminator, TimeAlignmentDiscriminator

log = logging.getLogger(__name__)


def _seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


@dataclass
class TrainState:
    generator: Generator
    tdad: TimeAlignmentDiscriminator
    mwmd: MultiWindowMelDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf

    def discriminator_parameters(self):
        return [*self.tdad.parameters(), *self.mwmd.parameters()]


def build_state(run: RunConfig) -> TrainState:
    cfg, tcfg = run.model, run.train
    torch.manual_seed(_seed(tcfg.seed, 0))
    gen = Generator(cfg)
    tdad = TimeAlignmentDiscriminator(cfg)
    mwmd = MultiWindowMelDiscriminator(cfg)
    kwargs = dict(lr=tcfg.lr, betas=(tcfg.beta1, tcfg.beta2), eps=tcfg.eps, weight_decay=tcfg.weight_decay)
    opt_g = torch.optim.AdamW(gen.parameters(), **kwargs)
    opt_d = torch.optim.AdamW([*tdad.parameters(), *mwmd.parameters()], **kwargs)
    return TrainState(gen, tdad, mwmd, opt_g, opt_d)


def lr_at(step: int, total_steps: int, tcfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_steps``, flat, then linear decay to zero.

    Decay covers the last ``1 - decay_start`` fraction of ``total_steps``.
    """
    lr = tcfg.lr
    if tcfg.warmup_steps > 0 and step < tcfg.warmup_steps:
        lr *= (step + 1) / tcfg.warmup_steps
    decay_from = int(total_steps * tcfg.decay_start)
    if total_steps > 0 and step >= decay_from and total_steps > decay_from:
        lr *= max(0.0, (total_steps - step) / (total_steps - decay_from))
    return lr


def _shifted(mel: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    return torch.stack([torch.roll(m, draw_shift(m.shape[0], rng), dims=0) for m in mel])


def discriminator_update(state: TrainState, video: torch.Tensor, mel: torch.Tensor, fake: torch.Tensor,
                         tcfg: TrainConfig, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """One optimizer step on both discriminators; ``fake`` must already be detached."""
    zero = torch.zeros((), dtype=mel.dtype)
    l_dt = l_dm = zero
    if tcfg.use_tdad:
        shifted = _shifted(mel if tcfg.shift_target == "real" else fake, rng)
        l_dt = losses.tdad_loss(state.tdad(mel, video), state.tdad(fake, video), state.tdad(shifted, video))
    if tcfg.use_mwmd:
        l_dm = losses.mwmd_loss(state.mwmd(mel, rng), state.mwmd(fake, rng))
    state.opt_d.zero_grad(set_to_none=True)
    if tcfg.use_tdad or tcfg.use_mwmd:
        (l_dt + l_dm).backward()
        state.opt_d.step()
    return l_dt.detach(), l_dm.detach()


def generator_losses(state: TrainState, video: torch.Tensor, mel: torch.Tensor, m_hat: torch.Tensor,
                     tcfg: TrainConfig, rng: np.random.Generator) -> dict[str, torch.Tensor]:
    l_mel = losses.mel_l1(m_hat, mel)
    l_adv = losses.adv_generator_loss(state.tdad(m_hat, video) if tcfg.use_tdad else None,
                                      state.mwmd(m_hat, rng) if tcfg.use_mwmd else None).to(mel.dtype)
    l_g = losses.generator_total(l_mel, l_adv, losses.LossWeights(tcfg.lambda_m, tcfg.lambda_a))
    return {"l_mel": l_mel, "l_adv": l_adv, "l_g_total": l_g}


def generator_update(state: TrainState, l_g: torch.Tensor) -> None:
    state.opt_g.zero_grad(set_to_none=True)
    l_g.backward()
    state.opt_g.step()
    # the generator loss also reaches discriminator weights; drop those gradients
    state.opt_d.zero_grad(set_to_none=True)


def train_step(state: TrainState, video: torch.Tensor, mel: torch.Tensor, tcfg: TrainConfig,
               lr: float | None = None, batch_ids=()) -> dict[str, float]:
    """One discriminator update followed by one generator update."""
    rng = np.random.default_rng(_seed(tcfg.seed, state.step, 1))
    torch.manual_seed(_seed(tcfg.seed, state.step, 2))
    if lr is not None:
        for opt in (state.opt_g, state.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
    state.generator.train(), state.tdad.train(), state.mwmd.train()

    identity = tcfg.identity_resample or state.step < tcfg.resample_warmup
    m_hat = state.generator(video, mel, mel, None if identity else rng)
    l_dt, l_dm = discriminator_update(state, video, mel, m_hat.detach(), tcfg, rng)
    values = generator_losses(state, video, mel, m_hat, tcfg, rng)
    values.update(l_dt=l_dt, l_dm=l_dm)
    bad = [k for k, v in values.items() if not torch.isfinite(v)]
    if bad:
        raise DivergenceError(f"non-finite {', '.join(sorted(bad))} at step {state.step}; "
                              f"batch ids {list(batch_ids)}")
    generator_update(state, values["l_g_total"])

    metrics = {"step": state.step, **{k: v.item() for k, v in values.items()}}
    state.step += 1
    return metrics


# --------------------------------------------------------------------------
# checkpoints


def state_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = {}
    for prefix, module in (("generator", state.generator), ("tdad", state.tdad), ("mwmd", state.mwmd)):
        for name, t in module.state_dict().items():
            tensors[f"{prefix}/{name}"] = t
    g, _ = ckpt_io.flatten_optimizer("optim_g", state.opt_g)
    d, _ = ckpt_io.flatten_optimizer("optim_d", state.opt_d)
    tensors.update(g)
    tensors.update(d)
    return tensors


def save_state(path, state: TrainState, run: RunConfig) -> str:
    _, g_meta = ckpt_io.flatten_optimizer("optim_g", state.opt_g)
    _, d_meta = ckpt_io.flatten_optimizer("optim_d", state.opt_d)
    meta = {
        "config": run.to_dict(),
        "config_hash": run.config_hash(),
        "data_hash": run.model.data_hash(),
        "step": state.step,
        "epoch": state.epoch,
        "best_val": None if math.isinf(state.best_val) else state.best_val,
        "optim_g": g_meta,
        "optim_d": d_meta,
    }
    return ckpt_io.save_checkpoint(path, state_tensors(state), meta)


def _load_module(module: torch.nn.Module, prefix: str, tensors: dict[str, torch.Tensor]) -> None:
    sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
    try:
        module.load_state_dict(sd)
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint tensors do not fit the configured {prefix}: {exc}") from exc


def run_config_from_meta(meta: dict) -> RunConfig:
    cfg = meta["config"]
    return RunConfig(model=config_from_dict(ModelConfig, cfg["model"]),
                     train=config_from_dict(TrainConfig, cfg["train"]),
                     paths=dict(cfg.get("paths", {})))


def load_state(path, run: RunConfig | None = None) -> tuple[TrainState, RunConfig, str]:
    tensors, meta, digest = ckpt_io.load_checkpoint(path)
    stored = run_config_from_meta(meta)
    if run is not None and run.config_hash() != stored.config_hash():
        raise ConfigError(f"checkpoint {path} was written with config {stored.config_hash()}, "
                          f"current config is {run.config_hash()}")
    state = build_state(stored)
    _load_module(state.generator, "generator", tensors)
    _load_module(state.tdad, "tdad", tensors)
    _load_module(state.mwmd, "mwmd", tensors)
    ckpt_io.restore_optimizer("optim_g", state.opt_g, tensors, meta["optim_g"])
    ckpt_io.restore_optimizer("optim_d", state.opt_d, tensors, meta["optim_d"])
    state.step = int(meta["step"])
    state.epoch = int(meta["epoch"])
    state.best_val = math.inf if meta["best_val"] is None else float(meta["best_val"])
    return state, stored, digest


def load_generator(path) -> tuple[Generator, RunConfig, str]:
    tensors, meta, digest = ckpt_io.load_checkpoint(path)
    run = run_config_from_meta(meta)
    gen = Generator(run.model)
    _load_module(gen, "generator", tensors)
    gen.eval()
    return gen, run, digest


# --------------------------------------------------------------------------
# fit


def stack_samples(samples: list[PairedSample]) -> tuple[torch.Tensor, torch.Tensor]:
    video = torch.from_numpy(np.stack([s.video for s in samples]).astype(np.float32))
    mel = torch.from_numpy(np.stack([s.mel for s in samples]).astype(np.float32))
    return video, mel


def _metrics_rows(path: Path, before_step: int) -> list[str]:
    if not path.exists():
        return []
    lines = path.read_text().splitlines()[1:]
    return [ln for ln in lines if ln and int(ln.split(",", 1)[0]) < before_step]


def format_metrics(row: dict) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow([row[k] if k == "step" else repr(row[k])
                                                   for k in losses.METRICS_HEADER])
    return buf.getvalue()


@torch.no_grad()
def validation_l_mel(gen: Generator, samples: list[PairedSample], seed: int, batch_size: int) -> float:
    gen.eval()
    total, count = 0.0, 0
    rng = np.random.default_rng(_seed(seed, 99))
    for i in range(0, len(samples), batch_size):
        video, mel = stack_samples(samples[i:i + batch_size])
        m_hat = gen(video, mel, mel, rng)
        total += float((m_hat - mel).abs().sum())
        count += mel.numel()
    return total / count


def fit(corpus: Corpus | list[PairedSample], run: RunConfig, out_dir, resume: bool = False,
        stop_after_epochs: int | None = None, progress=None) -> Path:
    """Train on the corpus train split; returns the path of the latest checkpoint.

    ``metrics.csv`` gets one row per step and ``val.csv`` one row per validated
    epoch.  With ``resume`` the run continues from ``out_dir/last.ckpt`` and the
    rows written after that checkpoint are discarded first.
    """
    torch.set_num_threads(1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = run.train
    if isinstance(corpus, Corpus):
        train_set, val_set = corpus.subset("train"), corpus.subset("val")
    else:
        train_set, val_set = list(corpus), []
    if not train_set:
        raise InsufficientDataError("training split is empty")
    last = out / "last.ckpt"
    if resume:
        if not last.exists():
            raise FormatError(f"cannot resume: {last} does not exist")
        state, _, _ = load_state(last, run)
    else:
        state = build_state(run)
    metrics_path = out / "metrics.csv"
    rows = _metrics_rows(metrics_path, state.step) if resume else []
    with metrics_path.open("w") as fh:
        fh.write(",".join(losses.METRICS_HEADER) + "\n")
        fh.writelines(r + "\n" for r in rows)
    val_path = out / "val.csv"
    if not resume or not val_path.exists():
        val_path.write_text("epoch,val_l_mel\n")
    else:
        kept = [ln for ln in val_path.read_text().splitlines()[1:] if ln and int(ln.split(",")[0]) <= state.epoch]
        val_path.write_text("epoch,val_l_mel\n" + "".join(k + "\n" for k in kept))

    videos, mels = stack_samples(train_set)
    ids = [s.id for s in train_set]
    n_batches = math.ceil(len(train_set) / tcfg.batch_size)
    total_steps = n_batches * tcfg.epochs
    epochs_run = 0
    while state.epoch < tcfg.epochs:
        order = np.random.default_rng(_seed(tcfg.seed, state.epoch, 3)).permutation(len(train_set))
        with metrics_path.open("a") as fh:
            for b in range(n_batches):
                idx = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
                lr = lr_at(state.step, total_steps, tcfg)
                row = train_step(state, videos[idx], mels[idx], tcfg, lr, [ids[i] for i in idx])
                fh.write(format_metrics(row))
                if progress is not None:
                    progress(row)
        state.epoch += 1
        epochs_run += 1
        if val_set and tcfg.val_every and state.epoch % tcfg.val_every == 0:
            val = validation_l_mel(state.generator, val_set, tcfg.seed, tcfg.batch_size)
            with val_path.open("a") as fh:
                fh.write(f"{state.epoch},{val!r}\n")
            if val < state.best_val:
                state.best_val = val
                save_state(out / "best.ckpt", state, run)
        if tcfg.ckpt_every and state.epoch % tcfg.ckpt_every == 0:
            save_state(last, state, run)
        if stop_after_epochs is not None and epochs_run >= stop_after_epochs:
            break
    save_state(last, state, run)
    log.info("finished at epoch %d, step %d", state.epoch, state.step)
    return last


# --------------------------------------------------------------------------
# inference


@torch.no_grad()
def infer(gen: Generator, video: np.ndarray, m_ref: np.ndarray, seed: int = 0, ablate=()) -> np.ndarray:
    """Generate a mel for ``video`` (T_v, D_v) in the timbre of ``m_ref`` (any length)."""
    cfg = gen.cfg
    video = np.asarray(video, dtype=np.float32)
    if video.ndim != 2 or video.shape[1] != cfg.video_dim:
        raise ConfigError(f"video features {video.shape} do not match checkpoint width {cfg.video_dim}")
    if m_ref.ndim != 2 or m_ref.shape[1] != cfg.n_mels:
        raise ConfigError(f"reference mel {m_ref.shape} does not match checkpoint n_mels {cfg.n_mels}")
    gen.eval()
    rng = np.random.default_rng(seed)
    out = gen.generate(torch.from_numpy(video)[None], torch.from_numpy(np.asarray(m_ref, np.float32))[None],
                       rng=rng, mode="infer", ablate=ablate)
    return out[0].numpy()


@torch.no_grad()
def infer_batch(gen: Generator, video: torch.Tensor, m_ref: torch.Tensor, seed: int = 0, ablate=()) -> torch.Tensor:
    gen.eval()
    return gen.generate(video, m_ref, rng=np.random.default_rng(seed), mode="infer", ablate=ablate)


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
