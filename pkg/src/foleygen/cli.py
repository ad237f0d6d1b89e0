"""Command-line entry point: ``foleygen {synth-data,train,infer,eval}``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np
import torch

from foleygen import data, dsp, evaluation, plotting, train
from foleygen.config import PRESETS, dump_toml, load_run_config
from foleygen.errors import ConfigError, DataError, DegenerateInputError, FoleyError, ShapeError
from foleygen.model import ABLATIONS

log = logging.getLogger("foleygen")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_synth_data(args) -> int:
    model_cfg, train_cfg = PRESETS[args.preset]
    out = Path(args.out)
    val = train_cfg.val_size if args.val is None else args.val
    test = train_cfg.test_size if args.test is None else args.test
    samples = data.synthesize_corpus(model_cfg, args.n, seed=args.seed, n_families=args.families,
                                     noise_floor=args.noise_floor)
    ids = [s.pair.id for s in samples]
    splits = data.make_splits(ids, seed=args.seed, val=val, test=test) if ids else data.SplitManifest()
    data.write_corpus(out, samples, model_cfg, splits)
    log.info("wrote %d samples to %s (%d/%d/%d)", len(ids), out,
             len(splits.train), len(splits.val), len(splits.test))
    return 0


def _check_data_hash(corpus_hash: str | None, expected: str, force: bool) -> None:
    if corpus_hash != expected and not force:
        raise ConfigError(f"corpus data hash {corpus_hash} does not match config data hash {expected} "
                          "(pass --force to override)")


def cmd_train(args) -> int:
    run = load_run_config(args.config, preset=args.preset, overrides=args.set or [])
    corpus = data.load_corpus(args.data, run.model)
    _check_data_hash(corpus.manifest.get("data_hash"), run.model.data_hash(), args.force)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_toml(run.to_dict()))
    last = train.fit(corpus, run, out, resume=args.resume)
    rows = train.read_metrics(out / "metrics.csv")
    if rows:
        plotting.plot_loss_curves(out / "loss_curves.png", rows)
    _write_json(out / "run.json", {"config_hash": run.config_hash(), "data_hash": run.model.data_hash(),
                                   "checkpoint": last.name, "steps": len(rows)})
    return 0


def _load_reference(path: Path, cfg) -> np.ndarray:
    if not path.exists():
        raise DataError(f"reference file not found: {path}")
    if path.suffix == ".vstf":
        return data.read_tensor(path)
    samples, rate = data.read_wav(path, expected_rate=cfg.sample_rate)
    return dsp.extract_mel(samples, cfg, sample_rate=rate, n_frames=None)


def cmd_infer(args) -> int:
    gen, run, digest = train.load_generator(args.ckpt)
    cfg = run.model
    video_path = Path(args.video_features)
    if not video_path.exists():
        raise DataError(f"video feature file not found: {video_path}")
    video = data.read_tensor(video_path)
    ref = _load_reference(Path(args.reference_audio), cfg)
    mel = train.infer(gen, video, ref, seed=args.seed)
    if not np.all(np.isfinite(mel)):
        raise FoleyError("generated mel is not finite")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.write_tensor(out / "mel.vstf", mel)
    plotting.plot_mels(out / "mel.png", [("reference", ref), ("generated", mel)],
                       hop_seconds=cfg.hop_size / cfg.sample_rate)
    if args.wav:
        data.write_wav(out / "audio.wav", dsp.mel_to_waveform(mel, cfg, seed=args.seed), cfg.sample_rate)
    _write_json(out / "infer.json", {"config_hash": run.config_hash(), "checkpoint_hash": digest,
                                     "mel_shape": list(mel.shape)})
    return 0


def cmd_eval(args) -> int:
    gen, run, digest = train.load_generator(args.ckpt)
    corpus = data.load_corpus(args.data, run.model)
    _check_data_hash(corpus.manifest.get("data_hash"), run.model.data_hash(), args.force)
    report, outs = evaluation.evaluate_split(gen, corpus, args.split, args.ablate, seed=args.seed,
                                             tol_frames=args.tol)
    report.update(config_hash=run.config_hash(), data_hash=run.model.data_hash(), checkpoint_hash=digest)
    jsonschema.validate(report, evaluation.REPORT_SCHEMA)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(path, report)
    samples = corpus.subset(args.split)
    panels = []
    for s, out in list(zip(samples, outs))[:3]:
        panels += [(f"{s.id} target", s.mel), (f"{s.id} generated", out)]
    plotting.plot_mels(path.with_suffix(".png"), panels, title=f"split={args.split} ablate={args.ablate}")
    print(json.dumps(report, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="foleygen", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic paired corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--preset", choices=["desk", "paper"], default="desk")
    s.add_argument("--families", type=int, default=2)
    s.add_argument("--val", type=int, default=None)
    s.add_argument("--test", type=int, default=None)
    s.add_argument("--noise-floor", type=float, default=None)
    s.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", help="train on a corpus")
    t.add_argument("--config", default=None)
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--force", action="store_true")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="generate a mel from video features and a reference")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--video-features", required=True)
    i.add_argument("--reference-audio", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--wav", action="store_true")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--report", required=True)
    e.add_argument("--ablate", choices=ABLATIONS, default=None)
    e.add_argument("--tol", type=int, default=3)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except FoleyError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (ShapeError, DegenerateInputError) as exc:
        log.error("%s", exc)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
