import re
import numpy as np
import pytest
import torch

from ucssl.datasets import SyntheticSpec, generate_synthetic

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """40 images per class at 64 px."""
    return generate_synthetic(SyntheticSpec(40, 64, seed=3), tmp_path_factory.mktemp("tiny"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: runs the desk-scale benchmark grid (minutes)")


def pytest_terminal_summary(terminalreporter):
    from _report import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(LINES, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
            terminalreporter.write_line(LINES[key])
