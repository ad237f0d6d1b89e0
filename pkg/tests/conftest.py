import dataclasses

import numpy as np
import pytest
import torch

from foleygen.config import DESK_MODEL, DESK_TRAIN, RunConfig

# Small enough for finite differences and quick forward passes.
TINY_MODEL = dataclasses.replace(
    DESK_MODEL,
    video_frames=16,
    video_dim=12,
    te_conv_layers=2,
    te_conv_channels=8,
    te_lstm_layers=1,
    te_lstm_hidden=4,
    sgau_layers=2,
    sgau_channels=8,
    sgau_groups=2,
    ae_lstm_layers=1,
    ae_lstm_hidden=4,
    be_lstm_layers=1,
    be_lstm_hidden=4,
    bg_dim=3,
    dec_convt_channels=8,
    fft_blocks=1,
    fft_hidden=8,
    fft_conv_channels=8,
    tdad_convt_channels=8,
    tdad_conv_channels=8,
    mwmd_channels=2,
    n_mels=16,
)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    torch.manual_seed(0)


@pytest.fixture
def tiny_cfg():
    return TINY_MODEL


@pytest.fixture
def desk_cfg():
    return DESK_MODEL


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_run():
    return RunConfig(model=TINY_MODEL, train=dataclasses.replace(DESK_TRAIN, batch_size=2, epochs=2,
                                                                 val_size=2, test_size=2, ckpt_every=1))


# Acceptance criteria append (number, title, passed, detail) here; printed at the end of the run.
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE_RESULTS.append((number, title, bool(passed), detail))
    print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})", flush=True)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}: {detail}")
