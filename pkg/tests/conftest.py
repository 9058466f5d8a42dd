import numpy as np
import pytest

from pathsmp.measures import FiniteMeasure
from pathsmp.spaces import NoiseEnsemble, QWienerConfig, build_grid, sample_noise


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


@pytest.fixture
def small_grid():
    return build_grid(1.0, 0.25, 16)


@pytest.fixture
def det_ens(small_grid):
    return NoiseEnsemble.zeros(small_grid, 1, 1)


@pytest.fixture
def mc_ens(small_grid):
    return sample_noise(QWienerConfig.cylindrical(1), small_grid, 512, seed=3)


@pytest.fixture
def dirac0(small_grid):
    return FiniteMeasure.dirac(0.0, small_grid.dt)


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name}: {d}" for name, _, d in parts)
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {detail}")
