from __future__ import annotations

from importlib import resources

import numpy as np
import pytest

from pnrarray.array_model import paper_config
from pnrarray.pmatrix import ProbabilityMatrix, build_uniform_pmatrix

_acceptance_lines: list[str] = []


def record_criterion(label: str, passed: bool, detail: str) -> None:
    _acceptance_lines.append(f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def table1() -> np.ndarray:
    text = resources.files("pnrarray").joinpath("data/table1.csv").read_text()
    return ProbabilityMatrix.from_csv(text).entries


@pytest.fixture(scope="session")
def paper_matrix() -> ProbabilityMatrix:
    return build_uniform_pmatrix(14, 0.895, 40)


@pytest.fixture
def cfg():
    return paper_config()


def occupancy_dp(N: int, eta: float, M: int) -> np.ndarray:
    """Independent oracle: Markov chain over the number of clicked pixels as
    photons arrive one by one (lost, new pixel, or already-clicked pixel)."""
    out = np.zeros((N + 1, M + 1))
    state = np.zeros(N + 1)
    state[0] = 1.0
    out[:, 0] = state
    c = np.arange(N + 1)
    for m in range(1, M + 1):
        stay = 1 - eta + eta * c / N
        move = eta * (N - c) / N
        new = state * stay
        new[1:] += state[:-1] * move[:-1]
        state = new
        out[:, m] = state
    return out
