import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import path_mm, rect_area, rect_mask
from dispenseforge.flow_oracle import FlowParams
from dispenseforge.geometry import GridSpec, TargetArea
from dispenseforge.quality import (
    CSV_HEADER,
    QualityReport,
    coverage,
    evaluate,
    find_voids,
    objective,
    overflow,
    report_for_footprint,
)
from oracles import batched_border_voids, border_bfs_voids


def test_coverage_fixtures(grid):
    area = rect_area(grid, 0, 0, 40, 40)
    assert coverage(area.mask, area) == 1.0
    assert coverage(~area.mask, area) == 0.0
    assert coverage(rect_mask(grid, 0, 0, 30, 40), area) == 0.75


def test_overflow_fixtures(grid):
    area = rect_area(grid, 10, 10, 30, 30)
    assert overflow(rect_mask(grid, 12, 12, 20, 20), area) == 0.0
    assert overflow(rect_mask(grid, 10, 20, 30, 40), area) == 0.5
    huge = np.zeros(grid.shape, bool)
    huge[40:64, :50] = True  # 1200 cells outside a 400-cell area
    assert overflow(huge, area) == 1.0


def test_void_fixtures(grid):
    full = np.ones(grid.shape, bool)
    vf, vc, vm = find_voids(full)
    assert (vf, vc, vm.any()) == (0.0, 0, False)

    ring = rect_mask(grid, 20, 20, 27, 27) & ~rect_mask(grid, 21, 21, 26, 26)
    vf, vc, vm = find_voids(ring)
    assert vc == 1 and vm.sum() == 25 and vf == 25 / 4096

    u_shape = ring.copy()
    u_shape[20, 23] = False
    assert find_voids(u_shape)[1] == 0


def test_empty_cells_move_only_through_edges(grid):
    # a diamond wall touches itself only at corners, yet air inside cannot
    # pass a corner either, so the interior is enclosed
    fp = np.zeros(grid.shape, bool)
    for i, j in ((9, 11), (10, 10), (10, 12), (11, 9), (11, 13), (12, 10), (12, 12), (13, 11)):
        fp[i, j] = True
    vf, vc, vm = find_voids(fp)
    assert vc == 1 and vm.sum() == 5
    fp[11, 13] = False  # open one wall cell
    assert find_voids(fp)[1] == 0


def test_voids_touching_border_are_open():
    grid = GridSpec(8, 8)
    fp = np.ones(grid.shape, bool)
    fp[0, 3] = fp[1, 3] = False
    assert find_voids(fp)[1] == 0
    fp[0, 3] = True
    assert find_voids(fp)[1] == 1


def test_reference_oracles_agree():
    rng = np.random.default_rng(5)
    masks = rng.random((300, 12, 12)) < rng.uniform(0.3, 0.8, (300, 1, 1))
    void, counts = batched_border_voids(masks)
    for m, v, c in zip(masks, void, counts):
        ref_void, ref_count = border_bfs_voids(m)
        assert np.array_equal(v, ref_void) and c == ref_count


def test_find_voids_matches_bfs_sample():
    rng = np.random.default_rng(11)
    masks = rng.random((2000, 16, 16)) < rng.uniform(0.2, 0.9, (2000, 1, 1))
    void, counts = batched_border_voids(masks)
    for m, v, c in zip(masks, void, counts):
        vf, vc, vm = find_voids(m)
        assert np.array_equal(vm, v) and vc == c and vf == v.sum() / 256


# metric values are ratios of cell counts
cell_ratio = st.integers(0, 4096).map(lambda k: k / 4096)


@given(cell_ratio, cell_ratio, cell_ratio)
def test_objective_terms(c, o, v):
    j = objective(c, o, v)
    assert j >= 0
    assert (j == 0) == (c == 1 and o == 0 and v == 0)
    if c < 1:
        assert objective(c + 1 / 4096, o, v) < j
    if o > 0:
        assert objective(c, o / 2, v) < j
    if v > 0:
        assert objective(c, o, v / 2) < j


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 20), st.integers(2, 20), st.integers(0, 40), st.integers(0, 40), st.integers(-5, 5), st.integers(-5, 5))
def test_metrics_translation_invariant(h, w, r, c, dr, dc):
    grid = GridSpec()
    rng = np.random.default_rng(h * 1000 + w * 10 + r)
    area = rect_area(grid, 10 + r // 4, 10 + c // 4, 10 + r // 4 + h, 10 + c // 4 + w)
    fp = np.zeros(grid.shape, bool)
    fp[8:50, 8:50] = rng.random((42, 42)) < 0.6
    moved_area = TargetArea(np.roll(area.mask, (dr, dc), axis=(0, 1)), grid)
    a = report_for_footprint(fp, area)
    b = report_for_footprint(np.roll(fp, (dr, dc), axis=(0, 1)), moved_area)
    assert a == b
    for v in (a.coverage, a.overflow, a.void_fraction):
        assert 0.0 <= v <= 1.0


def test_perfect_path_scores_zero(grid):
    area = rect_area(grid, 10, 10, 12, 20)
    p = path_mm([(10.5, 11.0), (19.5, 11.0)] + [(19.5, 11.0)] * 4, grid)
    r = evaluate(p, area)
    assert r == QualityReport(1.0, 0.0, 0.0, 0, 0.0)


def test_ring_path_traps_air(grid):
    area = rect_area(grid, 12, 12, 52, 52)
    ring = [(16, 16), (48, 16), (48, 48), (16, 48), (16, 16), (16, 16)]
    r = evaluate(path_mm(ring, grid), area)
    assert r.void_count >= 1 and r.void_fraction > 0 and r.objective > 0


def test_short_path_leaves_area_uncovered(square):
    p = path_mm([(30, 32), (34, 32)] + [(34, 32)] * 4)
    r = evaluate(p, square)
    assert r.coverage < 1 and r.objective > 0
    assert r.objective == pytest.approx(objective(r.coverage, r.overflow, r.void_fraction))


def test_non_convergence_scores_penalty(square):
    p = path_mm([(30, 32), (34, 32)] + [(34, 32)] * 4)
    r = evaluate(p, square, params=FlowParams(max_iters=3), penalty=6.0)
    assert r.objective == 6.0


def test_csv_round_trip():
    r = QualityReport(0.75, 0.125, 0.01, 2, 0.415)
    assert CSV_HEADER.split(",") == ["coverage", "overflow", "void_fraction", "void_count", "objective"]
    assert QualityReport.from_csv_row(r.to_csv_row()) == r
