import numpy as np
import pytest

from diffloc.geom import Intrinsics, random_pose


@pytest.fixture
def K():
    return Intrinsics(400.0, 400.0, 320.0, 240.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def camera_points(rng, n, depth=(3.0, 6.0), half=1.0):
    return np.column_stack([rng.uniform(-half, half, n), rng.uniform(-half, half, n), rng.uniform(*depth, n)])


def posed_points(rng, n, **kw):
    """(pose, camera points, scene points) with every point in front of the camera."""
    h = random_pose(rng, 2.0)
    e = camera_points(rng, n, **kw)
    return h, e, h.apply(e)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE = []


def record(name: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
