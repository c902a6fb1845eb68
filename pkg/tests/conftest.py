import numpy as np
import pytest
import torch

from affordet.config import RunConfig, SynthConfig, replace
from affordet.data import synthesize

TINY = {
    "model.input_size": 64,
    "model.stem_channels": 8,
    "model.stage_channels": (8, 16, 16),
    "model.head_channels": 8,
    "model.aff_channels": 8,
    "model.aff_hidden": 8,
    "adapter.lm_dim": 16,
    "adapter.lm_heads": 2,
    "adapter.pool": 3,
    "adapter.gate_grid": 2,
    "train.epochs": 2,
    "train.warmup_epochs": 1,
    "train.batch_size": 4,
    "train.eval_every": 1,
}


def tiny_config(**overrides) -> RunConfig:
    return replace(RunConfig(), **{**TINY, **overrides}).validate()


def tiny_samples(n=8, seed=3, size=64):
    return synthesize(SynthConfig(num_images=n, image_size=size, seed=seed))


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def samples():
    return tiny_samples()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# one summary line per acceptance check -----------------------------------------

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for name, (ok, detail) in sorted(ACCEPTANCE.items()):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
