from __future__ import annotations

import numpy as np
import pytest

from lumenloc.geometry import CameraIntrinsics, Pose
from lumenloc.simulator import DEFAULT_INTRINSICS

# acceptance criterion -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def K100():
    return CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


@pytest.fixture
def K_default():
    return DEFAULT_INTRINSICS


def random_pose(rng: np.random.Generator, max_angle: float = np.pi, scale: float = 50.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose.from_rotvec(axis * rng.uniform(0, max_angle), rng.uniform(-scale, scale, size=3))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
