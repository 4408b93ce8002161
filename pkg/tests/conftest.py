import numpy as np
import pytest
import torch

from egsnet.config import Config
from egsnet.datasets import SyntheticConfig, generate_synthetic_suite

TINY_SYNTH = dict(
    image_side=16,
    num_basic_classes=7,
    num_compound_classes=12,
    samples_per_class=24,
    noise_std=0.3,
    domain_shift_strength=0.3,
)

TINY = dict(
    **TINY_SYNTH,
    channels=8,
    blocks=2,
    epochs_joint=2,
    epochs_alternate=1,
    episodes_per_epoch=6,
    period_len=2,
    n_way=5,
    k_shot=2,
    n_query=4,
    batch_size=16,
    eval_tasks=50,
    eval_query=4,
    theta_step=3,
)


@pytest.fixture(scope="session")
def tiny_registry():
    cfg = SyntheticConfig(**{k: TINY_SYNTH[k] for k in TINY_SYNTH}, seed=0)
    return generate_synthetic_suite(cfg)


@pytest.fixture
def tiny_cfg():
    return Config(**TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
