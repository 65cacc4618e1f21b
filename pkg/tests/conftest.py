"""Shared fixtures and the acceptance-line reporter."""

from __future__ import annotations

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

# One line per acceptance criterion, printed in the terminal summary so the
# verdicts stay visible in a plain `pytest -v` run.
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
