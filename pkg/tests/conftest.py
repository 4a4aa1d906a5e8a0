import pytest
import torch

from crossart.denoiser import DenoiserConfig, DenoiserState

torch.set_num_threads(1)

SMALL = DenoiserConfig(base_channels=8, heads=2, time_embed_dim=16)


@pytest.fixture(scope="session")
def small_state():
    return DenoiserState.initialize(SMALL, seed=0)


@pytest.fixture(scope="session")
def default_state():
    return DenoiserState.initialize(DenoiserConfig(), seed=0)


@pytest.fixture(scope="session")
def synthetic_256():
    from crossart.data import make_synthetic_dataset

    return make_synthetic_dataset(256, 32, seed=0)


@pytest.fixture(scope="session")
def trained(synthetic_256):
    """The toy denoiser after the standard 2000-step run, with its wall time."""
    import time

    from crossart.training import train_toy

    start = time.perf_counter()
    state = train_toy(DenoiserState.initialize(DenoiserConfig(), seed=0), synthetic_256, 2000, seed=0)
    return state, time.perf_counter() - start


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
