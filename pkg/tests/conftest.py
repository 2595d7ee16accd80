import sys

import numpy as np
import pytest

from resq.calib import collect
from resq.model import DecoderConfig, generate, init_toy_model


@pytest.fixture(scope="session")
def toy_model():
    return init_toy_model(DecoderConfig(), seed=0)


@pytest.fixture(scope="session")
def toy_streams(toy_model):
    calib = generate(toy_model, 64, 128, seed=1)
    evals = generate(toy_model, 16, 128, seed=2)
    return calib, evals


@pytest.fixture(scope="session")
def toy_bundle(toy_model, toy_streams):
    return collect(toy_model, toy_streams[0], n_samples=64, n_hessian=32, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
