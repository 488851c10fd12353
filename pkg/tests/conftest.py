import sys

import numpy as np
import pytest

from glacier_vi.mesh import SurfaceField, build_interval, extrude


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def slab(L=1000.0, nx=4, H=100.0, nz=3, bed=None):
    m = build_interval(L, nx)
    b = SurfaceField(m, np.zeros(nx + 1) if bed is None else bed)
    s = SurfaceField(m, b.values + H)
    return extrude(m, b, s, nz, H_min=1.0)


def dome_mesh(nx=40, nz=6, L=100e3, R=70e3, H0=1300.0):
    m = build_interval(L, nx)
    x = m.nodes
    H = H0 * np.maximum(0, 1 - (np.abs(x) / R) ** (4 / 3)) ** (3 / 7)
    return extrude(m, SurfaceField(m, 0 * x), SurfaceField(m, H), nz)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "LINES", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.LINES:
        terminalreporter.write_line(line)
