import numpy as np
import pytest

from nestfield.scene import Camera, Gaussian, GaussianScene


def axis_camera(width=64, height=64, f=100.0) -> Camera:
    """Camera at the origin looking down +z (world and camera frames coincide)."""
    return Camera(np.eye(3), np.zeros(3), f, f, width / 2, height / 2, width, height)


def single_scene(means, scale=0.05, opacity=1.0, colors=None) -> GaussianScene:
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    n = len(means)
    scales = np.full((n, 3), scale) if np.ndim(scale) == 0 else np.asarray(scale)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    op = np.full(n, opacity) if np.ndim(opacity) == 0 else np.asarray(opacity)
    cols = np.full((n, 3), 0.5) if colors is None else colors
    return GaussianScene(means, scales, quats, op, cols)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cam():
    return axis_camera()


# --- acceptance reporting ----------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """record(name, passed, detail) prints and keeps one PASS/FAIL line per criterion."""

    def record(name: str, passed: bool, detail: str = "") -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
