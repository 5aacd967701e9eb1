from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ptbench.model import ModelConfig, TinyLM
from ptbench.taskdata import generate_problems

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("stress", max_examples=1500, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL = ModelConfig(vocab_size=40, context_len=40, window=6, dim=4, hidden=8)


@pytest.fixture
def small_model() -> TinyLM:
    return TinyLM.init(SMALL, seed=3)


@pytest.fixture(scope="session")
def tiny_problems():
    return generate_problems(0, 24, "2-step", "train")


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b)))))


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
