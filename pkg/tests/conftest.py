import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from specoffload.tinyformer import ModelConfig, init_random  # noqa: E402

# Filled by tests/test_acceptance.py, printed once at the end of the run.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def toy_cfg():
    return ModelConfig(num_layers=8, hidden_dim=64, num_heads=4, ffn_dim=128, vocab_size=256)


@pytest.fixture(scope="session")
def toy(toy_cfg):
    return init_random(toy_cfg, 0)


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(num_layers=3, hidden_dim=16, num_heads=2, ffn_dim=32, vocab_size=32, max_context=256)


@pytest.fixture(scope="session")
def small(small_cfg):
    return init_random(small_cfg, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
