"""Shared fixtures: random stabilizable systems and the (cached) reference HSV studies."""

from __future__ import annotations

import numpy as np
import pytest

from deirl import evalharness as eh
from deirl import lincontrol as lc


def random_stabilizable(rng: np.random.Generator, n: int, m: int):
    """Random ``(A, B)`` with a stabilizing gain from pole placement at ``-1 .. -n``."""
    while True:
        A = rng.normal(size=(n, n))
        B = rng.normal(size=(n, m))
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n)])
        if np.linalg.svd(ctrb, compute_uv=False)[-1] < 1e-3:
            continue
        poles = -np.arange(1.0, n + 1.0)
        try:
            K0 = lc.place_gain(A, B, poles)
        except ValueError:
            continue
        if lc.is_hurwitz(A - B @ K0)[0]:
            return A, B, K0


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def hsv_cfg():
    return eh.load_config()


@pytest.fixture(scope="session")
def eval1_result(hsv_cfg):
    return eh.cmd_eval1(hsv_cfg)


@pytest.fixture(scope="session")
def eval2_result(hsv_cfg):
    return eh.cmd_eval2(hsv_cfg)


@pytest.fixture(scope="session")
def freqresp_result(hsv_cfg):
    return eh.cmd_freqresp(hsv_cfg)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one acceptance line; the terminal summary prints them all."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number: int, title: str, passed: bool, detail: str):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} {title}: {detail}"
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
