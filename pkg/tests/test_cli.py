import json

import jsonschema
import numpy as np
import pytest

from foleygen import data, train
from foleygen.cli import main
from foleygen.config import PAPER_MODEL, PAPER_TRAIN, RunConfig
from foleygen.evaluation import REPORT_SCHEMA


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["synth-data", "--out", str(root), "--n", "16", "--seed", "3", "--preset", "desk"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(corpus_dir), "--out", str(out), "--set", "train.epochs=2"]) == 0
    return out


def test_synth_data_layout_and_determinism(corpus_dir, tmp_path):
    dirs = sorted(p.name for p in (corpus_dir / "samples").iterdir())
    assert len(dirs) == 16
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    assert len(manifest["samples"]) == 16
    splits = json.loads((corpus_dir / "splits.json").read_text())
    assert (len(splits["train"]), len(splits["val"]), len(splits["test"])) == (12, 2, 2)
    again = tmp_path / "again"
    assert main(["synth-data", "--out", str(again), "--n", "16", "--seed", "3"]) == 0
    for rel in ["manifest.json", "splits.json", "samples/s00004/mel.vstf", "samples/s00004/audio.wav"]:
        assert (again / rel).read_bytes() == (corpus_dir / rel).read_bytes()


def test_synth_data_empty(tmp_path):
    assert main(["synth-data", "--out", str(tmp_path), "--n", "0"]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["samples"] == []


def test_train_outputs(trained):
    rows = train.read_metrics(trained / "metrics.csv")
    assert len(rows) == 4
    assert (trained / "last.ckpt").exists() and (trained / "loss_curves.png").stat().st_size > 0
    assert json.loads((trained / "run.json").read_text())["config_hash"]


def test_train_bad_config_exit_2(corpus_dir, tmp_path):
    assert main(["train", "--data", str(corpus_dir), "--out", str(tmp_path), "--set", "train.nope=1"]) == 2
    assert main(["train", "--data", str(corpus_dir), "--out", str(tmp_path), "--set", "train.lr='x'"]) == 2


def test_train_missing_data_exit_3(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 3


def test_train_divergence_exit_4(tmp_path):
    root = tmp_path / "corpus"
    assert main(["synth-data", "--out", str(root), "--n", "6", "--val", "1", "--test", "1"]) == 0
    for sid in json.loads((root / "splits.json").read_text())["train"]:
        mel = data.read_tensor(root / "samples" / sid / "mel.vstf")
        mel[5, 5] = np.nan
        data.write_tensor(root / "samples" / sid / "mel.vstf", mel)
    assert main(["train", "--data", str(root), "--out", str(tmp_path / "run"), "--set", "train.epochs=1"]) == 4


def test_infer_outputs(trained, corpus_dir, tmp_path):
    sample = corpus_dir / "samples" / "s00001"
    out = tmp_path / "gen"
    assert main(["infer", "--ckpt", str(trained / "last.ckpt"), "--video-features", str(sample / "video.vstf"),
                 "--reference-audio", str(corpus_dir / "samples" / "s00002" / "audio.wav"),
                 "--out", str(out), "--wav"]) == 0
    mel = data.read_tensor(out / "mel.vstf")
    assert mel.shape == (216, 80) and np.all(np.isfinite(mel))
    assert (out / "mel.png").stat().st_size > 0
    samples, rate = data.read_wav(out / "audio.wav")
    assert rate == 22050 and samples.size > 0


def test_infer_missing_reference_exit_3(trained, corpus_dir, tmp_path):
    code = main(["infer", "--ckpt", str(trained / "last.ckpt"),
                 "--video-features", str(corpus_dir / "samples" / "s00001" / "video.vstf"),
                 "--reference-audio", str(tmp_path / "missing.wav"), "--out", str(tmp_path)])
    assert code == 3


def test_infer_silence_reference(trained, corpus_dir, tmp_path):
    ref = tmp_path / "silence.wav"
    data.write_wav(ref, np.zeros(22050), 22050)
    assert main(["infer", "--ckpt", str(trained / "last.ckpt"),
                 "--video-features", str(corpus_dir / "samples" / "s00001" / "video.vstf"),
                 "--reference-audio", str(ref), "--out", str(tmp_path / "o")]) == 0
    assert np.all(np.isfinite(data.read_tensor(tmp_path / "o" / "mel.vstf")))


def test_infer_paper_shapes(tmp_path):
    run = RunConfig(model=PAPER_MODEL, train=PAPER_TRAIN)
    state = train.build_state(run)
    train.save_state(tmp_path / "paper.ckpt", state, run)
    rng = np.random.default_rng(0)
    data.write_tensor(tmp_path / "v.vstf", rng.normal(size=(215, 2048)).astype(np.float32))
    data.write_wav(tmp_path / "ref.wav", 0.1 * rng.standard_normal(220500), 22050)
    assert main(["infer", "--ckpt", str(tmp_path / "paper.ckpt"), "--video-features", str(tmp_path / "v.vstf"),
                 "--reference-audio", str(tmp_path / "ref.wav"), "--out", str(tmp_path / "o")]) == 0
    assert data.read_tensor(tmp_path / "o" / "mel.vstf").shape == (860, 80)


def test_eval_report_schema_and_hash_checks(trained, corpus_dir, tmp_path):
    report = tmp_path / "r.json"
    assert main(["eval", "--ckpt", str(trained / "last.ckpt"), "--data", str(corpus_dir),
                 "--split", "test", "--report", str(report)]) == 0
    body = json.loads(report.read_text())
    jsonschema.validate(body, REPORT_SCHEMA)
    assert body["n_samples"] == 2 and body["ablate"] is None
    assert report.with_suffix(".png").stat().st_size > 0
    assert main(["eval", "--ckpt", str(trained / "last.ckpt"), "--data", str(corpus_dir),
                 "--report", str(tmp_path / "a.json"), "--ablate", "no-timbre"]) == 0
    assert json.loads((tmp_path / "a.json").read_text())["ablate"] == "no-timbre"


def test_eval_refuses_mismatched_data_unless_forced(trained, corpus_dir, tmp_path):
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    other = tmp_path / "other"
    other.mkdir()
    (other / "samples").symlink_to(corpus_dir / "samples")
    (other / "splits.json").write_text((corpus_dir / "splits.json").read_text())
    manifest["data_hash"] = "0" * 16
    (other / "manifest.json").write_text(json.dumps(manifest))
    args = ["eval", "--ckpt", str(trained / "last.ckpt"), "--data", str(other), "--report", str(tmp_path / "r.json")]
    assert main(args) == 2
    assert main(args + ["--force"]) == 0


def test_eval_empty_split_exit_3(trained, tmp_path):
    empty = tmp_path / "empty"
    assert main(["synth-data", "--out", str(empty), "--n", "0"]) == 0
    assert main(["eval", "--ckpt", str(trained / "last.ckpt"), "--data", str(empty),
                 "--report", str(tmp_path / "r.json")]) == 3


def test_vs_seed_overrides_config(monkeypatch):
    from foleygen.config import load_run_config
    monkeypatch.setenv("VS_SEED", "42")
    assert load_run_config(None, "desk").train.seed == 42
