"""Grid, dispense path and target area types plus the feedrate rule.

Path points live in normalized coordinates: ``x`` is a fraction of the grid
width and ``y`` a fraction of the grid height. Millimetres only appear after
denormalizing through a :class:`GridSpec`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidGeometry, WrongArity, ZeroLengthPath

N_POINTS = 6
N_COORDS = 2 * N_POINTS
MIN_PATH_LENGTH = 0.5  # mm

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class GridSpec:
    width_cells: int = 64
    height_cells: int = 64
    cell_size: float = 1.0
    gap_height: float = 1.0

    def __post_init__(self):
        if self.width_cells < 8 or self.height_cells < 8:
            raise InvalidGeometry(f"grid must be at least 8x8 cells, got {self.width_cells}x{self.height_cells}")
        if not (self.cell_size > 0 and self.gap_height > 0):
            raise InvalidGeometry("cell_size and gap_height must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_cells, self.width_cells)

    @property
    def width_mm(self) -> float:
        return self.width_cells * self.cell_size

    @property
    def height_mm(self) -> float:
        return self.height_cells * self.cell_size

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise InvalidGeometry(f"point ({self.x}, {self.y}) outside the unit square")


@dataclass(frozen=True)
class DispensePath:
    """Six-point polygonal chain with a constant feedrate (mm^2).

    ``feedrate`` is ``None`` for a freshly decoded path; :func:`with_feedrate`
    attaches one computed by the volume rule.
    """

    points: tuple[Point, ...]
    feedrate: float | None = None

    def __post_init__(self):
        pts = tuple(p if isinstance(p, Point) else Point(*p) for p in self.points)
        if len(pts) != N_POINTS:
            raise WrongArity(f"a dispense path has exactly {N_POINTS} points, got {len(pts)}")
        object.__setattr__(self, "points", pts)
        if self.feedrate is not None and not (self.feedrate > 0 and math.isfinite(self.feedrate)):
            raise InvalidGeometry(f"feedrate must be positive and finite, got {self.feedrate}")

    @classmethod
    def from_array(cls, coords, feedrate: float | None = None) -> "DispensePath":
        arr = np.asarray(coords, dtype=np.float64).reshape(-1)
        if arr.size != N_COORDS:
            raise WrongArity(f"expected {N_COORDS} coordinates, got {arr.size}")
        return cls(tuple(Point(float(x), float(y)) for x, y in arr.reshape(N_POINTS, 2)), feedrate)

    def as_array(self) -> np.ndarray:
        """Normalized coordinates, shape ``(6, 2)``, columns ``x, y``."""
        return np.array([(p.x, p.y) for p in self.points], dtype=np.float64)

    def to_mm(self, grid: GridSpec) -> np.ndarray:
        return self.as_array() * np.array([grid.width_mm, grid.height_mm])

    def with_feedrate(self, feedrate: float) -> "DispensePath":
        return DispensePath(self.points, float(feedrate))

    def reversed(self) -> "DispensePath":
        return DispensePath(self.points[::-1], self.feedrate)


@dataclass(frozen=True, eq=False)
class TargetArea:
    mask: np.ndarray
    grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self):
        mask = np.asarray(self.mask).astype(bool)
        if mask.shape != self.grid.shape:
            raise InvalidGeometry(f"mask shape {mask.shape} does not match grid {self.grid.shape}")
        if not mask.any():
            raise InvalidGeometry("target area is empty")
        _, n = ndimage.label(mask, structure=FOUR_CONNECTED)
        if n != 1:
            raise InvalidGeometry(f"target area must be one 4-connected component, found {n}")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def n_cells(self) -> int:
        return int(self.mask.sum())

    def bbox(self) -> tuple[int, int, int, int]:
        """``(row0, col0, row1, col1)``, end-exclusive."""
        rows = np.flatnonzero(self.mask.any(axis=1))
        cols = np.flatnonzero(self.mask.any(axis=0))
        return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1

    def __eq__(self, other):
        return (
            isinstance(other, TargetArea)
            and self.grid == other.grid
            and np.array_equal(self.mask, other.mask)
        )

    __hash__ = None


def path_length(path: DispensePath, grid: GridSpec) -> float:
    pts = path.to_mm(grid)
    return float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))


def required_volume(area: TargetArea) -> float:
    g = area.grid
    return area.n_cells * g.cell_area * g.gap_height


def feedrate_for(path: DispensePath, area: TargetArea, min_length: float = MIN_PATH_LENGTH) -> float:
    length = path_length(path, area.grid)
    if length <= 0 or length < min_length:
        raise ZeroLengthPath(f"path length {length:.6g} mm is below the {min_length} mm minimum")
    return required_volume(area) / length


def with_required_feedrate(path: DispensePath, area: TargetArea, min_length: float = MIN_PATH_LENGTH) -> DispensePath:
    return path.with_feedrate(feedrate_for(path, area, min_length))


def logistic(x):
    # split form avoids overflow warnings for large |x|
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode_path(raw: Sequence[float]) -> DispensePath:
    """Squash 12 unbounded network outputs into a feedrate-less path."""
    arr = np.asarray(raw, dtype=np.float64).reshape(-1)
    if arr.size != N_COORDS:
        raise WrongArity(f"expected {N_COORDS} raw values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise InvalidGeometry("raw path values must be finite")
    return DispensePath.from_array(logistic(arr))


def encode_path(path: DispensePath, eps: float = 1e-6) -> np.ndarray:
    """Inverse of :func:`decode_path` (coordinates clipped away from 0 and 1)."""
    p = np.clip(path.as_array().reshape(-1), eps, 1 - eps)
    return np.log(p) - np.log1p(-p)


# path file -----------------------------------------------------------------

PATH_MAGIC = "dispenseforge-path v1"


def _decimal(value: float) -> str:
    # shortest round-trip digits, never exponent notation
    return np.format_float_positional(float(value), unique=True, trim="0")


def format_path(path: DispensePath, grid: GridSpec) -> str:
    if path.feedrate is None:
        raise InvalidGeometry("path has no feedrate; attach one before export")
    lines = [PATH_MAGIC, f"feedrate_mm2={_decimal(path.feedrate)}"]
    lines += [f"{_decimal(x)},{_decimal(y)}" for x, y in path.to_mm(grid).tolist()]
    return "\n".join(lines) + "\n"


def parse_path(text: str, grid: GridSpec) -> DispensePath:
    lines = text.strip("\n").split("\n")
    if len(lines) != 2 + N_POINTS or lines[0] != PATH_MAGIC:
        raise InvalidGeometry(f"not a {PATH_MAGIC!r} file")
    key, _, value = lines[1].partition("=")
    if key != "feedrate_mm2":
        raise InvalidGeometry("second line must be feedrate_mm2=<value>")
    pts = []
    for line in lines[2:]:
        xs, ys = line.split(",")
        pts.append(Point(float(xs) / grid.width_mm, float(ys) / grid.height_mm))
    return DispensePath(tuple(pts), float(value))
