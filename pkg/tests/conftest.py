import numpy as np
import pytest

from obstaclehj import build_grid, get_problem


def smooth_field(grid, rng, amplitude=0.1, modes=3):
    """Random low-frequency trigonometric field; keeps one-sided gradients small."""
    x = grid.points
    out = np.zeros(grid.shape)
    for _ in range(modes):
        k = rng.integers(-2, 3, size=grid.dim)
        phase = 2 * np.pi * (x @ k) + rng.uniform(0, 2 * np.pi)
        out += rng.uniform(-1, 1) * np.cos(phase)
    return amplitude * out / modes


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid128():
    return build_grid(1, 128)


@pytest.fixture(scope="session")
def catalog_problem():
    return get_problem


ACCEPTANCE_LINES: list[str] = []


def record_criterion(label: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
