import numpy as np
import pytest

from dispenseforge.geometry import DispensePath, GridSpec, TargetArea


def rect_mask(grid, r0, c0, r1, c1):
    m = np.zeros(grid.shape, dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def rect_area(grid=GridSpec(), r0=16, c0=16, r1=48, c1=48):
    return TargetArea(rect_mask(grid, r0, c0, r1, c1), grid)


def path_mm(points_mm, grid=GridSpec(), feedrate=None):
    """Path from millimetre points (x, y) on ``grid``."""
    pts = np.asarray(points_mm, dtype=np.float64) / np.array([grid.width_mm, grid.height_mm])
    return DispensePath.from_array(pts, feedrate)


def serpentine(r0, c0, r1, c1, grid=GridSpec(), feedrate=None):
    """Three horizontal passes across a box given in cells."""
    ys = np.linspace(r0 + (r1 - r0) / 6, r1 - (r1 - r0) / 6, 3)
    xa, xb = c0 + 2.0, c1 - 2.0
    pts = [(xa, ys[0]), (xb, ys[0]), (xb, ys[1]), (xa, ys[1]), (xa, ys[2]), (xb, ys[2])]
    return path_mm(np.array(pts) * grid.cell_size, grid, feedrate)


@pytest.fixture
def grid():
    return GridSpec()


@pytest.fixture
def square():
    return rect_area()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
