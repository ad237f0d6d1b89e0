import dataclasses

import numpy as np
import pytest
import torch

from foleygen import checkpoint, data, losses, train
from foleygen.config import RunConfig
from foleygen.errors import ConfigError, DivergenceError, FormatError


@pytest.fixture(scope="module")
def tiny_samples():
    from conftest import TINY_MODEL
    return [s.pair for s in data.synthesize_corpus(TINY_MODEL, 6, seed=2)]


def test_lr_schedule():
    from foleygen.config import TrainConfig
    t = TrainConfig(lr=1.0, warmup_steps=4, decay_start=0.5)
    assert train.lr_at(0, 100, t) == pytest.approx(0.25)
    assert train.lr_at(3, 100, t) == pytest.approx(1.0)
    assert train.lr_at(49, 100, t) == pytest.approx(1.0)
    assert train.lr_at(50, 100, t) == pytest.approx(1.0)
    assert train.lr_at(75, 100, t) == pytest.approx(0.5)
    assert train.lr_at(100, 100, t) == 0.0


def test_train_step_updates_every_generator_parameter(tiny_run, tiny_samples):
    state = train.build_state(tiny_run)
    video, mel = train.stack_samples(tiny_samples[:2])
    before = {n: p.detach().clone() for n, p in state.generator.named_parameters()}
    row = train.train_step(state, video, mel, tiny_run.train)
    assert set(row) == set(losses.METRICS_HEADER)
    assert all(np.isfinite(v) for v in row.values())
    dead = [n for n, p in state.generator.named_parameters() if torch.equal(p, before[n])]
    assert dead == []


def test_zero_lambda_a_is_pure_l1(tiny_run, tiny_samples):
    run = dataclasses.replace(tiny_run, train=dataclasses.replace(tiny_run.train, lambda_a=0.0))
    state = train.build_state(run)
    video, mel = train.stack_samples(tiny_samples[:2])

    def grads(with_adv):
        torch.manual_seed(7)
        m_hat = state.generator(video, mel, mel, np.random.default_rng(3))
        l_mel = losses.mel_l1(m_hat, mel)
        l_adv = losses.adv_generator_loss(state.tdad(m_hat, video), state.mwmd(m_hat)) if with_adv else 0.0
        w = losses.LossWeights(run.train.lambda_m, run.train.lambda_a)
        params = list(state.generator.parameters())
        return torch.autograd.grad(losses.generator_total(l_mel, l_adv, w), params, allow_unused=True)

    state.tdad.eval()
    for a, b in zip(grads(True), grads(False)):
        if a is None or b is None:
            assert a is None and b is None
        else:
            torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_resample_warmup_uses_identity_then_switches(tiny_run, tiny_samples):
    video, mel = train.stack_samples(tiny_samples[:2])

    def params_after(steps, **kw):
        run = dataclasses.replace(tiny_run, train=dataclasses.replace(tiny_run.train, **kw))
        state = train.build_state(run)
        for _ in range(steps):
            train.train_step(state, video, mel, run.train)
        return torch.cat([p.detach().flatten() for p in state.generator.parameters()])

    warm = params_after(2, resample_warmup=2)
    torch.testing.assert_close(warm, params_after(2, identity_resample=True), rtol=0, atol=0)
    assert not torch.equal(params_after(3, resample_warmup=2), params_after(3, identity_resample=True))


def test_divergence_raises_with_batch_ids(tiny_run, tiny_samples):
    state = train.build_state(tiny_run)
    video, mel = train.stack_samples(tiny_samples[:2])
    mel[0, 3, 2] = float("nan")
    with pytest.raises(DivergenceError, match="s00000"):
        train.train_step(state, video, mel, tiny_run.train, batch_ids=["s00000", "s00001"])


def test_fit_is_deterministic(tmp_path, tiny_run, tiny_samples):
    train.fit(tiny_samples, tiny_run, tmp_path / "a")
    train.fit(tiny_samples, tiny_run, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert len(a.splitlines()) == 1 + 3 * 2


def test_resume_equals_straight_run(tmp_path, tiny_run, tiny_samples):
    train.fit(tiny_samples, tiny_run, tmp_path / "straight")
    train.fit(tiny_samples, tiny_run, tmp_path / "split", stop_after_epochs=1)
    assert len((tmp_path / "split" / "metrics.csv").read_text().splitlines()) == 1 + 3
    train.fit(tiny_samples, tiny_run, tmp_path / "split", resume=True)
    assert ((tmp_path / "straight" / "metrics.csv").read_bytes()
            == (tmp_path / "split" / "metrics.csv").read_bytes())


def test_resume_refuses_other_config(tmp_path, tiny_run, tiny_samples):
    train.fit(tiny_samples, tiny_run, tmp_path, stop_after_epochs=1)
    other = dataclasses.replace(tiny_run, train=dataclasses.replace(tiny_run.train, lr=0.5))
    with pytest.raises(ConfigError, match="config"):
        train.fit(tiny_samples, other, tmp_path, resume=True)
    with pytest.raises(FormatError):
        train.fit(tiny_samples, tiny_run, tmp_path / "empty", resume=True)


def test_checkpoint_roundtrip(tmp_path, tiny_run):
    state = train.build_state(tiny_run)
    digest = train.save_state(tmp_path / "c.ckpt", state, tiny_run)
    assert digest == checkpoint.file_sha256(tmp_path / "c.ckpt")
    loaded, run, d2 = train.load_state(tmp_path / "c.ckpt", tiny_run)
    assert d2 == digest and run.config_hash() == tiny_run.config_hash()
    for (n, a), (_, b) in zip(state.generator.state_dict().items(), loaded.generator.state_dict().items()):
        assert torch.equal(a, b), n


def test_checkpoint_version_refused(tmp_path, tiny_run):
    path = tmp_path / "c.ckpt"
    train.save_state(path, train.build_state(tiny_run), tiny_run)
    buf = bytearray(path.read_bytes())
    buf[4] = 9
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="version 9"):
        checkpoint.load_checkpoint(path)


def test_infer_silence_reference_is_finite(tiny_run):
    gen = train.build_state(tiny_run).generator
    cfg = tiny_run.model
    silence = np.full((4 * cfg.video_frames, cfg.n_mels), np.log(cfg.mel_floor), np.float32)
    out = train.infer(gen, np.zeros((cfg.video_frames, cfg.video_dim), np.float32), silence)
    assert out.shape == silence.shape and np.all(np.isfinite(out))
    with pytest.raises(ConfigError):
        train.infer(gen, np.zeros((cfg.video_frames, cfg.video_dim + 1), np.float32), silence)


def test_shift_target_fake_variant_runs(tiny_run, tiny_samples):
    run = dataclasses.replace(tiny_run, train=dataclasses.replace(tiny_run.train, shift_target="fake"))
    state = train.build_state(run)
    video, mel = train.stack_samples(tiny_samples[:2])
    assert np.isfinite(train.train_step(state, video, mel, run.train)["l_dt"])


def _digest(module):
    return [p.detach().clone() for p in module.parameters()]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_half_steps_touch_only_their_own_parameters(tiny_run, tiny_samples):
    state = train.build_state(tiny_run)
    tcfg = tiny_run.train
    video, mel = train.stack_samples(tiny_samples[:2])
    rng = np.random.default_rng(0)
    m_hat = state.generator(video, mel, mel, rng)

    g0, t0, w0 = _digest(state.generator), _digest(state.tdad), _digest(state.mwmd)
    train.discriminator_update(state, video, mel, m_hat.detach(), tcfg, rng)
    g1, t1, w1 = _digest(state.generator), _digest(state.tdad), _digest(state.mwmd)
    assert _same(g0, g1)
    assert not _same(t0, t1) and not _same(w0, w1)

    values = train.generator_losses(state, video, mel, m_hat, tcfg, rng)
    train.generator_update(state, values["l_g_total"])
    assert _same(t1, _digest(state.tdad)) and _same(w1, _digest(state.mwmd))
    assert not _same(g1, _digest(state.generator))


def test_every_parameter_receives_gradient(tiny_run, tiny_samples):
    state = train.build_state(tiny_run)
    seen = set()
    for prefix, module in (("g", state.generator), ("t", state.tdad), ("m", state.mwmd)):
        for name, p in module.named_parameters():
            key = f"{prefix}.{name}"
            p.register_hook(lambda g, key=key: seen.add(key) if bool(g.abs().sum() > 0) else None)
    video, mel = train.stack_samples(tiny_samples)
    for _ in range(5):
        train.train_step(state, video[:2], mel[:2], tiny_run.train)
    every = {f"{p}.{n}" for p, m in (("g", state.generator), ("t", state.tdad), ("m", state.mwmd))
             for n, _ in m.named_parameters()}
    assert every - seen == set()
