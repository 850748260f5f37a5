import numpy as np
import pytest

from adaperceiver.model import AdaPerceiver, ModelConfig
from adaperceiver.tensor import precision


def small_config(**overrides) -> ModelConfig:
    base = dict(
        dim=32, heads=4, depth=3, n_latents=16, token_grans=(4, 8, 16), widths=(16, 24, 32),
        depths=(1, 2, 3), layer_scale_init=0.5, init_std=0.1,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def high():
    with precision("high"):
        yield


@pytest.fixture
def small_model(high):
    return AdaPerceiver(small_config(), seed=7)


@pytest.fixture
def images(rng):
    return rng.normal(size=(3, 1, 28, 28))


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
