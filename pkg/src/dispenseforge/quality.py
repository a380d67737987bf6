"""Exact quality metrics on binary footprints and the scalar objective."""

from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np
from scipy import ndimage

from .errors import NoConvergence
from .flow_oracle import DEFAULT_PARAMS, CompressedState, FlowParams, simulate
from .geometry import FOUR_CONNECTED, DispensePath, TargetArea

DEFAULT_WEIGHTS = (1.0, 1.0, 4.0)  # coverage, overflow, void
DEFAULT_PENALTY = 6.0

CSV_HEADER = "coverage,overflow,void_fraction,void_count,objective"


@dataclass(frozen=True)
class QualityReport:
    coverage: float
    overflow: float
    void_fraction: float
    void_count: int
    objective: float

    def to_csv_row(self) -> str:
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in astuple(self))

    @classmethod
    def from_csv_row(cls, row: str) -> "QualityReport":
        c, o, vf, vc, j = row.strip().split(",")
        return cls(float(c), float(o), float(vf), int(vc), float(j))


def _mask(a) -> np.ndarray:
    return a.mask if isinstance(a, TargetArea) else np.asarray(a, dtype=bool)


def coverage(footprint: np.ndarray, area: TargetArea) -> float:
    target = _mask(area)
    fp = np.asarray(footprint, dtype=bool)
    if fp.shape != target.shape:
        raise ValueError(f"footprint shape {fp.shape} differs from area {target.shape}")
    return int(np.count_nonzero(fp & target)) / int(np.count_nonzero(target))


def overflow(footprint: np.ndarray, area: TargetArea) -> float:
    target = _mask(area)
    fp = np.asarray(footprint, dtype=bool)
    if fp.shape != target.shape:
        raise ValueError(f"footprint shape {fp.shape} differs from area {target.shape}")
    return min(1.0, int(np.count_nonzero(fp & ~target)) / int(np.count_nonzero(target)))


def find_voids(footprint: np.ndarray) -> tuple[float, int, np.ndarray]:
    """Empty cells that cannot reach the grid border through empty cells.

    Returns ``(void_fraction, void_count, void_mask)``; the fraction is taken
    over all grid cells.
    """
    empty = ~np.asarray(footprint, dtype=bool)
    labels, n = ndimage.label(empty, structure=FOUR_CONNECTED)
    if n == 0:
        return 0.0, 0, np.zeros(empty.shape, dtype=bool)
    border = np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])
    open_ids = np.unique(border[border > 0])
    enclosed = np.ones(n + 1, dtype=bool)
    enclosed[0] = False
    enclosed[open_ids] = False
    void = enclosed[labels]
    count = int(enclosed.sum())
    return int(void.sum()) / void.size, count, void


def objective(cov: float, over: float, void_fraction: float, weights=DEFAULT_WEIGHTS) -> float:
    w_c, w_o, w_v = weights
    return w_c * (1.0 - cov) + w_o * over + w_v * void_fraction


def report_for_footprint(footprint: np.ndarray, area: TargetArea, weights=DEFAULT_WEIGHTS) -> QualityReport:
    c = coverage(footprint, area)
    o = overflow(footprint, area)
    vf, vc, _ = find_voids(footprint)
    return QualityReport(c, o, vf, vc, objective(c, o, vf, weights))


def penalty_report(penalty: float = DEFAULT_PENALTY) -> QualityReport:
    return QualityReport(0.0, 0.0, 0.0, 0, penalty)


def simulate_and_score(
    path: DispensePath,
    area: TargetArea,
    weights=DEFAULT_WEIGHTS,
    params: FlowParams = DEFAULT_PARAMS,
    penalty: float = DEFAULT_PENALTY,
) -> tuple[QualityReport, CompressedState | None]:
    """Like :func:`evaluate` but also hands back the simulated state (``None`` on failure)."""
    try:
        sim = simulate(path, area, params)
    except NoConvergence:
        return penalty_report(penalty), None
    return report_for_footprint(sim.footprint, area, weights), sim


def evaluate(
    path: DispensePath,
    area: TargetArea,
    weights=DEFAULT_WEIGHTS,
    params: FlowParams = DEFAULT_PARAMS,
    penalty: float = DEFAULT_PENALTY,
) -> QualityReport:
    """Simulate ``path`` on ``area`` and score the footprint; non-convergence scores ``penalty``."""
    return simulate_and_score(path, area, weights, params, penalty)[0]
