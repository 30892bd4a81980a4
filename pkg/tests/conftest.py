from pathlib import Path

import numpy as np
import pytest

from wchj import InitialData, OperatorConfig, TorusGrid, quadratic_system

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def brute_hopf_lax(x, t, candidates=100_000):
    """min_y cos(2 pi y) + |x-y|^2/(2t) by dense search; independent of the package."""
    half = 2.0 * np.sqrt(t)
    off = np.linspace(-half, half, candidates)
    out = np.empty(len(x))
    arg = np.empty(len(x))
    for j, xj in enumerate(np.asarray(x, dtype=float)):
        y = xj + off
        vals = np.cos(2 * np.pi * y) + (xj - y) ** 2 / (2 * t)
        k = int(np.argmin(vals))
        out[j], arg[j] = vals[k], y[k]
    return out, arg


def cosine(x):
    return np.cos(2 * np.pi * x)


@pytest.fixture(scope="session")
def decoupled():
    return quadratic_system([0.5], [None], 0.4, 1.2, 1.0)


@pytest.fixture(scope="session")
def cross():
    return quadratic_system([0.5, 0.5], [lambda x, u: u[..., 1], lambda x, u: u[..., 0]], 0.4, 1.2, 1.0)


def cross_phi(grid):
    return InitialData.from_function(
        grid, lambda x: np.concatenate([np.cos(2 * np.pi * x), np.sin(2 * np.pi * x)], -1)
    )


def small_grid(n=32, T=0.25, n_t=16, dim=1):
    return TorusGrid(dim, n, T, n_t)


def small_cfg(v_max=4.0, **kw):
    return OperatorConfig(v_max=v_max, **kw)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
