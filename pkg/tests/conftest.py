import os

import pytest
import torch
from hypothesis import HealthCheck, settings

from discn.harness import ExperimentConfig, TrainConfig
from discn.head import HeadConfig
from discn.saa import SaaConfig

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


def tiny_saa(size=16, channels=3, **kw):
    # grids 4 -> 2 -> 1
    return SaaConfig(image_size=size, channels=channels,
                     schedule=((4, 0, 4), (2, 0, 2), (2, 0, 2)), attn_dim=8, **kw)


def tiny_head(size=16, channels=3, n=3, **kw):
    return HeadConfig(in_channels=channels, image_size=size, n_stimuli=n, channels=(4, 8),
                      d1=8, d2=4, d4=4, **kw)


def tiny_config(n=3, size=16, **train_kw) -> ExperimentConfig:
    train_kw.setdefault("max_epochs", 2)
    train_kw.setdefault("batch_size", 4)
    return ExperimentConfig(TrainConfig(**train_kw), tiny_saa(size), tiny_head(size, n=n))


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_data():
    from discn.synth import generate_dataset
    return generate_dataset(seed=3, size=16, n_stimuli=3, n_subjects=10, n_normals=2, divergence=1.0)


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = {}
N_CRITERIA = 11


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for i in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(ACCEPTANCE.get(i, f"criterion {i:2d} ERROR  no verdict recorded"))
