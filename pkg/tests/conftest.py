import numpy as np
import pytest

from rbsde.model import GalerkinModel, ObstacleProblem

INACTIVE = -1.0e6


def zero_drift(t, x):
    return np.zeros_like(x)


def brownian(d=1, sigma=1.0):
    """``dX = sigma dW`` in ``d`` dimensions."""
    return GalerkinModel(d, d, np.zeros((d, d)), zero_drift,
                         lambda t, x: np.broadcast_to(sigma * np.eye(d), (x.shape[0], d, d)).copy(),
                         0.0, "brownian")


def frozen_model():
    return GalerkinModel(1, 1, [[0.0]], zero_drift, lambda t, x: np.zeros((x.shape[0], 1, 1)),
                         0.0, "frozen")


def problem(generator=None, terminal=None, obstacle=None, L=1.0, fallback=False):
    return ObstacleProblem(
        generator or (lambda t, x, y, z: np.zeros(x.shape[0])),
        terminal or (lambda x: np.zeros(x.shape[0])),
        obstacle or (lambda t, x: np.full(x.shape[0], INACTIVE)),
        0.0, L, fallback,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
