"""Deterministic volume-conserving deposit-and-squeeze simulator.

This is the ground truth that the learned flow and void surrogates are
trained against. The pipeline has two stages:

``deposit``
    walks the path in short steps and drops ``feedrate * step`` of material
    at every step, spread with a tent kernel over the cells around the nozzle.
``compress``
    caps every cell at the bondline gap. Any excess above the cap is handed
    out in equal quarters to the 4-neighbours, simultaneously for all cells,
    until nothing exceeds the cap. Excess leaving the grid is booked as lost
    volume. The capped heights are finally binarized into the footprint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .errors import NoConvergence
from .geometry import FOUR_CONNECTED, DispensePath, GridSpec, TargetArea, feedrate_for


@dataclass(frozen=True)
class FlowParams:
    step_fraction: float = 0.25
    nozzle_radius: float = 1.0  # cells
    tol: float = 1e-7  # mm
    max_iters: int = 50000
    occupancy_threshold: float = 0.5
    min_path_length: float = 0.5  # mm

    def __post_init__(self):
        if not 0 < self.step_fraction <= 0.25:
            raise ValueError("step_fraction must be in (0, 0.25]")
        if self.nozzle_radius < 0.5:
            raise ValueError("nozzle_radius must be at least half a cell")

    @classmethod
    def from_config(cls, cfg) -> "FlowParams":
        return cls(
            step_fraction=cfg.deposit_step_fraction,
            nozzle_radius=cfg.nozzle_radius,
            tol=cfg.compress_tol,
            max_iters=cfg.compress_max_iters,
            occupancy_threshold=cfg.occupancy_threshold,
            min_path_length=cfg.min_path_length,
        )


DEFAULT_PARAMS = FlowParams()


@dataclass(frozen=True, eq=False)
class DepositField:
    heights: np.ndarray  # mm, float64
    total_volume: float  # mm^3


@dataclass(frozen=True, eq=False)
class CompressedState:
    heights: np.ndarray  # every cell 0 or gap_height
    footprint: np.ndarray  # bool
    spread_heights: np.ndarray  # capped heights before binarization
    input_volume: float
    spread_volume: float
    lost_volume: float
    residual_volume: float  # binarized volume minus spread volume
    iterations: int

    def __eq__(self, other):
        if not isinstance(other, CompressedState):
            return NotImplemented
        return (
            np.array_equal(self.spread_heights, other.spread_heights)
            and np.array_equal(self.footprint, other.footprint)
            and (self.input_volume, self.spread_volume, self.lost_volume, self.residual_volume, self.iterations)
            == (other.input_volume, other.spread_volume, other.lost_volume, other.residual_volume, other.iterations)
        )

    __hash__ = None


def _step_samples(pts_cells: np.ndarray, step: float):
    """Midpoints (in cell units) and lengths (in cell units) of the traversal steps."""
    centers, lengths = [], []
    for a, b in zip(pts_cells[:-1], pts_cells[1:]):
        seg = float(np.hypot(*(b - a)))
        if seg == 0.0:
            continue
        n = max(1, math.ceil(seg / step))
        t = (np.arange(n) + 0.5) / n
        centers.append(a + t[:, None] * (b - a))
        lengths.append(np.full(n, seg / n))
    if not centers:
        return np.zeros((0, 2)), np.zeros(0)
    return np.concatenate(centers), np.concatenate(lengths)


def deposit(path: DispensePath, grid: GridSpec, params: FlowParams = DEFAULT_PARAMS) -> DepositField:
    """Rasterize the material laid down along ``path`` (feedrate must be set)."""
    heights = np.zeros(grid.shape, dtype=np.float64)
    feedrate = path.feedrate or 0.0
    pts = path.as_array() * np.array([grid.width_cells, grid.height_cells])
    samples, seg_len = _step_samples(pts, params.step_fraction)
    if feedrate == 0.0 or samples.shape[0] == 0:
        return DepositField(heights, 0.0)

    volumes = feedrate * seg_len * grid.cell_size  # cell units -> mm
    r = params.nozzle_radius
    reach = math.ceil(r) + 1
    offsets = np.arange(-reach, reach + 1)
    # nearest cell index below each sample, then a (2R+1)^2 stencil around it
    base = np.floor(samples - 0.5).astype(np.int64)
    cx = base[:, 0:1] + offsets[None, :]  # (S, K) column indices
    cy = base[:, 1:2] + offsets[None, :]
    wx = np.maximum(0.0, 1.0 - np.abs(cx + 0.5 - samples[:, 0:1]) / r)
    wy = np.maximum(0.0, 1.0 - np.abs(cy + 0.5 - samples[:, 1:2]) / r)
    wx[(cx < 0) | (cx >= grid.width_cells)] = 0.0
    wy[(cy < 0) | (cy >= grid.height_cells)] = 0.0
    w = wy[:, :, None] * wx[:, None, :]  # (S, Ky, Kx)
    w /= w.sum(axis=(1, 2), keepdims=True)
    vol = w * volumes[:, None, None]
    rows = np.broadcast_to(cy[:, :, None], w.shape)
    cols = np.broadcast_to(cx[:, None, :], w.shape)
    keep = w > 0
    np.add.at(heights, (rows[keep], cols[keep]), vol[keep])
    heights /= grid.cell_area
    return DepositField(heights, float(heights.sum() * grid.cell_area))


def field_from_heights(heights: np.ndarray, grid: GridSpec) -> DepositField:
    heights = np.asarray(heights, dtype=np.float64)
    if heights.shape != grid.shape or np.any(heights < 0):
        raise ValueError("heights must be non-negative and match the grid")
    return DepositField(heights.copy(), float(heights.sum() * grid.cell_area))


@numba.njit(cache=True)
def _spread_kernel(h, cap, tol, max_iters):
    ny, nx = h.shape
    ex = np.zeros_like(h)
    lost = 0.0
    for it in range(max_iters + 1):
        worst = 0.0
        for i in range(ny):
            for j in range(nx):
                e = h[i, j] - cap
                if e > 0.0:
                    ex[i, j] = e
                    if e > worst:
                        worst = e
                else:
                    ex[i, j] = 0.0
        if worst < tol:
            return lost, it, worst
        if it == max_iters:
            return lost, it, worst
        for i in range(ny):
            for j in range(nx):
                up = ex[i - 1, j] * 0.25 if i > 0 else 0.0
                down = ex[i + 1, j] * 0.25 if i < ny - 1 else 0.0
                left = ex[i, j - 1] * 0.25 if j > 0 else 0.0
                right = ex[i, j + 1] * 0.25 if j < nx - 1 else 0.0
                h[i, j] = (h[i, j] - ex[i, j]) + ((up + down) + (left + right))
        edge = 0.0
        for j in range(nx):
            edge += ex[0, j] + ex[ny - 1, j]
        for i in range(ny):
            edge += ex[i, 0] + ex[i, nx - 1]
        lost += edge * 0.25
    return lost, max_iters, worst


def spread(heights: np.ndarray, cap: float, tol: float, max_iters: int):
    """Capped equal-split redistribution. Returns (heights, lost_height_sum, iterations).

    Neighbour contributions are summed as ``(up + down) + (left + right)`` so
    that mirroring or transposing the input mirrors the output bit-exactly.
    """
    h = np.array(heights, dtype=np.float64, copy=True)
    lost, iters, worst = _spread_kernel(h, float(cap), float(tol), int(max_iters))
    if worst >= tol:
        raise NoConvergence(f"excess {worst:.3g} mm still above tolerance after {max_iters} iterations")
    return h, lost, iters


def compress(field: DepositField, grid: GridSpec, params: FlowParams = DEFAULT_PARAMS) -> CompressedState:
    cap = grid.gap_height
    h, lost_h, iters = spread(field.heights, cap, params.tol, params.max_iters)
    footprint = h >= params.occupancy_threshold * cap
    binary = np.where(footprint, cap, 0.0)
    spread_volume = float(h.sum() * grid.cell_area)
    return CompressedState(
        heights=binary,
        footprint=footprint,
        spread_heights=h,
        input_volume=field.total_volume,
        spread_volume=spread_volume,
        lost_volume=lost_h * grid.cell_area,
        residual_volume=float(binary.sum() * grid.cell_area) - spread_volume,
        iterations=iters,
    )


def simulate(path: DispensePath, area: TargetArea, params: FlowParams = DEFAULT_PARAMS) -> CompressedState:
    if path.feedrate is None:
        path = path.with_feedrate(feedrate_for(path, area, params.min_path_length))
    else:
        # still reject degenerate chains even when a feedrate was supplied
        feedrate_for(path, area, params.min_path_length)
    return compress(deposit(path, area.grid, params), area.grid, params)


def n_components(mask: np.ndarray) -> int:
    return int(ndimage.label(mask, structure=FOUR_CONNECTED)[1])
