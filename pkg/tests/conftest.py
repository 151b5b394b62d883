"""Shared fixtures: small datasets and models reused across the suite."""

import numpy as np
import pytest

from subcal import GenConfig, PassThrough, generate_physical_data, get_model
from subcal.models import _ProcessAt


def data_seed(entropy, t=0):
    return np.random.SeedSequence(entropy=entropy, spawn_key=(1, t))


def run_seed(entropy, rep=0):
    return np.random.SeedSequence(entropy=entropy, spawn_key=(2, 0, 0, 0, rep))


@pytest.fixture(scope="session")
def example1():
    return get_model("example1")


@pytest.fixture(scope="session")
def example2():
    return get_model("example2")


@pytest.fixture(scope="session")
def greenshields():
    return get_model("greenshields")


@pytest.fixture(scope="session")
def ex1_emulator(example1):
    return PassThrough(example1)


@pytest.fixture(scope="session")
def ex1_data(example1):
    cfg = GenConfig(
        zeta=_ProcessAt(example1, (0.2, 0.3)),
        sigma=0.2,
        seed=data_seed(42),
        omega=example1.x_box,
    )
    return generate_physical_data(cfg, 2000)


@pytest.fixture(scope="session")
def ex1_data_noiseless(example1):
    cfg = GenConfig(
        zeta=_ProcessAt(example1, (0.2, 0.3)),
        sigma=0.0,
        seed=data_seed(43),
        omega=example1.x_box,
    )
    return generate_physical_data(cfg, 500)
