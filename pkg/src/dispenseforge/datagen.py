"""Synthetic rectilinear target areas, random paths and the pretraining dataset.

Target areas stand in for room outlines taken from floor plans: a base
rectangle with up to four axis-aligned notches, or an L/T/U template with
jittered arm sizes. Everything is driven by explicit integer seeds.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Config
from .errors import CorruptDataset, DatasetEmpty, RecipeInfeasible, ZeroLengthPath
from .flow_oracle import FlowParams, deposit, n_components
from .geometry import N_COORDS, N_POINTS, DispensePath, GridSpec, TargetArea, feedrate_for
from .quality import QualityReport, simulate_and_score

log = logging.getLogger(__name__)

TEMPLATES = ("L", "T", "U")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ShapeRecipe:
    seed: int
    base: tuple[int, int] | None = None  # (width, height) in cells; None draws one
    n_notches: int = 0
    notch_frac: tuple[float, float] = (0.15, 0.45)  # notch side as a fraction of the base side
    template: str | None = None
    chamfer: bool = False

    def __post_init__(self):
        if not 0 <= self.n_notches <= 4:
            raise ValueError("n_notches must be in 0..4")
        if self.template is not None and self.template not in TEMPLATES:
            raise ValueError(f"template must be one of {TEMPLATES}")
        lo, hi = self.notch_frac
        if not 0 < lo <= hi < 1:
            raise ValueError("notch_frac must satisfy 0 < lo <= hi < 1")


def random_recipe(seed: int, cfg: Config = Config()) -> ShapeRecipe:
    rng = np.random.default_rng([seed, 1])
    template = None
    if rng.random() < cfg.template_prob:
        template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    n_notches = 0 if template else int(rng.integers(0, cfg.max_notches + 1))
    return ShapeRecipe(seed=seed, n_notches=n_notches, template=template, chamfer=cfg.chamfer)


def _draw_base(rng, grid: GridSpec, lo: float, hi: float, margin: int):
    w_max = grid.width_cells - 2 * margin
    h_max = grid.height_cells - 2 * margin
    total = grid.width_cells * grid.height_cells
    for _ in range(50):
        frac = rng.uniform(lo, hi)
        aspect = np.exp(rng.uniform(-0.6, 0.6))
        w = int(round(np.sqrt(frac * total * aspect)))
        h = int(round(frac * total / max(w, 1)))
        if 4 <= w <= w_max and 4 <= h <= h_max:
            return w, h
    return min(w_max, grid.width_cells // 2), min(h_max, grid.height_cells // 2)


def _template_mask(kind: str, w: int, h: int, rng) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    tw = max(3, int(round(w * rng.uniform(0.3, 0.5))))  # arm thickness (horizontal)
    th = max(3, int(round(h * rng.uniform(0.3, 0.5))))  # arm thickness (vertical)
    if kind == "L":
        m[:, :tw] = True
        m[h - th :, :] = True
    elif kind == "T":
        m[:th, :] = True
        c0 = (w - tw) // 2
        m[:, c0 : c0 + tw] = True
    else:  # U
        m[:, :tw] = True
        m[:, w - tw :] = True
        m[h - th :, :] = True
    return m


def _cut_notches(m: np.ndarray, n: int, frac, rng) -> np.ndarray:
    h, w = m.shape
    for _ in range(n):
        nw = max(1, int(round(w * rng.uniform(*frac))))
        nh = max(1, int(round(h * rng.uniform(*frac))))
        side = int(rng.integers(4))  # 0 top, 1 bottom, 2 left, 3 right
        if side in (0, 1):
            c0 = int(rng.integers(0, w - nw + 1))
            r0 = 0 if side == 0 else h - nh
        else:
            r0 = int(rng.integers(0, h - nh + 1))
            c0 = 0 if side == 2 else w - nw
        m[r0 : r0 + nh, c0 : c0 + nw] = False
    return m


def _chamfer(m: np.ndarray, rng) -> np.ndarray:
    h, w = m.shape
    size = int(rng.integers(2, max(3, min(h, w) // 4)))
    yy, xx = np.mgrid[0:h, 0:w]
    corner = int(rng.integers(4))
    dy = yy if corner < 2 else h - 1 - yy
    dx = xx if corner % 2 == 0 else w - 1 - xx
    m[dx + dy < size] = False
    return m


def gen_area(recipe: ShapeRecipe, grid: GridSpec = GridSpec(), cfg: Config = Config()) -> TargetArea:
    """Deterministic rectilinear mask for ``recipe``; raises RecipeInfeasible after the retry budget."""
    lo, hi = cfg.area_min_fraction, cfg.area_max_fraction
    total = grid.width_cells * grid.height_cells
    margin = 2
    for attempt in range(cfg.recipe_attempts):
        rng = np.random.default_rng([recipe.seed, 2, attempt])
        if recipe.base is not None and attempt == 0:
            w, h = recipe.base
        else:
            w, h = _draw_base(rng, grid, lo, hi, margin)
        w = min(w, grid.width_cells - 2 * margin)
        h = min(h, grid.height_cells - 2 * margin)
        if w < 2 or h < 2:
            continue
        if recipe.template is not None:
            shape = _template_mask(recipe.template, w, h, rng)
        else:
            shape = _cut_notches(np.ones((h, w), dtype=bool), recipe.n_notches, recipe.notch_frac, rng)
        if recipe.chamfer:
            shape = _chamfer(shape, rng)
        r0 = int(rng.integers(margin, grid.height_cells - margin - h + 1))
        c0 = int(rng.integers(margin, grid.width_cells - margin - w + 1))
        mask = np.zeros(grid.shape, dtype=bool)
        mask[r0 : r0 + h, c0 : c0 + w] = shape
        frac = mask.sum() / total
        if lo <= frac <= hi and n_components(mask) == 1:
            return TargetArea(mask, grid)
    raise RecipeInfeasible(f"recipe {recipe} failed after {cfg.recipe_attempts} attempts")


def sample_random_path(
    area: TargetArea, rng_seed, bbox_prob: float = 0.7, min_length: float = 0.5
) -> DispensePath:
    """Six points, each uniform in the target's bounding box (``bbox_prob``) or the whole grid."""
    rng = np.random.default_rng(rng_seed)
    r0, c0, r1, c1 = area.bbox()
    g = area.grid
    box_lo = np.array([c0 / g.width_cells, r0 / g.height_cells])
    box_hi = np.array([c1 / g.width_cells, r1 / g.height_cells])
    while True:
        inside = rng.random(N_POINTS) < bbox_prob
        pts = np.where(
            inside[:, None],
            rng.uniform(box_lo, box_hi, size=(N_POINTS, 2)),
            rng.uniform(0.0, 1.0, size=(N_POINTS, 2)),
        )
        path = DispensePath.from_array(pts)
        try:
            return path.with_feedrate(feedrate_for(path, area, min_length))
        except ZeroLengthPath:
            continue


# -- dataset file --------------------------------------------------------------

MAGIC = "dispenseforge-dataset v1"


@dataclass(frozen=True, eq=False)
class PretrainSample:
    mask: np.ndarray  # bool (H, W)
    coords: np.ndarray  # float32 (12,) normalized
    feedrate: float  # stored as float32
    footprint: np.ndarray  # bool (H, W)
    quality: QualityReport

    @property
    def path(self) -> DispensePath:
        return DispensePath.from_array(self.coords.astype(np.float64), float(self.feedrate))

    def deposit_image(self, grid: GridSpec, params: FlowParams = FlowParams()) -> np.ndarray:
        return deposit(self.path, grid, params).heights


def _record_size(grid: GridSpec) -> int:
    bits = (grid.width_cells * grid.height_cells + 7) // 8
    return 2 * bits + 4 * (N_COORDS + 1 + 5)


def _encode_record(s: PretrainSample) -> bytes:
    q = s.quality
    floats = np.concatenate(
        [s.coords.astype("<f4"), np.array([s.feedrate], "<f4"),
         np.array([q.coverage, q.overflow, q.void_fraction, q.void_count, q.objective], "<f4")]
    )  # fmt: skip
    return (
        np.packbits(s.mask.reshape(-1)).tobytes()
        + floats[: N_COORDS + 1].tobytes()
        + np.packbits(s.footprint.reshape(-1)).tobytes()
        + floats[N_COORDS + 1 :].tobytes()
    )


def _decode_record(raw: bytes, grid: GridSpec) -> PretrainSample:
    n = grid.width_cells * grid.height_cells
    bits = (n + 7) // 8
    pos = 0
    mask = np.unpackbits(np.frombuffer(raw, np.uint8, bits, pos))[:n].reshape(grid.shape).astype(bool)
    pos += bits
    head = np.frombuffer(raw, "<f4", N_COORDS + 1, pos)
    pos += 4 * (N_COORDS + 1)
    fp = np.unpackbits(np.frombuffer(raw, np.uint8, bits, pos))[:n].reshape(grid.shape).astype(bool)
    pos += bits
    q = np.frombuffer(raw, "<f4", 5, pos)
    report = QualityReport(float(q[0]), float(q[1]), float(q[2]), int(q[3]), float(q[4]))
    return PretrainSample(mask, head[:N_COORDS].astype(np.float32), float(head[N_COORDS]), fp, report)


def write_dataset(samples, grid: GridSpec, path) -> None:
    samples = list(samples)
    header = (
        f"{MAGIC}\n"
        f"grid width_cells={grid.width_cells} height_cells={grid.height_cells} "
        f"cell_size={grid.cell_size!r} gap_height={grid.gap_height!r}\n"
        f"count={len(samples)}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for s in samples:
            fh.write(_encode_record(s))


@dataclass
class Dataset:
    grid: GridSpec
    samples: list[PretrainSample]

    def __len__(self):
        return len(self.samples)

    def split(self, name: str) -> list[int]:
        """Record indices of a fixed 80/10/10 partition by index modulo 10."""
        if name not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        if name == "train":
            return [i for i in range(len(self)) if i % 10 < 8]
        return [i for i in range(len(self)) if i % 10 == (8 if name == "val" else 9)]

    def areas(self, indices=None) -> list[TargetArea]:
        idx = range(len(self)) if indices is None else indices
        return [TargetArea(self.samples[i].mask, self.grid) for i in idx]


def read_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    stream = io.BytesIO(blob)
    try:
        magic = stream.readline().decode("ascii").rstrip("\n")
        grid_line = stream.readline().decode("ascii").split()
        count_line = stream.readline().decode("ascii").strip()
    except UnicodeDecodeError:
        raise CorruptDataset(f"{path}: unreadable header") from None
    if magic != MAGIC or not grid_line or grid_line[0] != "grid" or not count_line.startswith("count="):
        raise CorruptDataset(f"{path}: not a {MAGIC!r} file")
    kv = dict(item.split("=", 1) for item in grid_line[1:])
    grid = GridSpec(int(kv["width_cells"]), int(kv["height_cells"]), float(kv["cell_size"]), float(kv["gap_height"]))
    count = int(count_line.split("=", 1)[1])
    size = _record_size(grid)
    body = blob[stream.tell() :]
    if len(body) != count * size:
        raise CorruptDataset(f"{path}: expected {count} records of {size} bytes, found {len(body)} bytes")
    samples = [_decode_record(body[i * size : (i + 1) * size], grid) for i in range(count)]
    return Dataset(grid, samples)


def make_sample(index: int, seed: int, cfg: Config, params: FlowParams | None = None) -> PretrainSample | None:
    """Area, random path and oracle labels for record ``index``; ``None`` if the oracle fails."""
    grid = cfg.grid
    params = params or FlowParams.from_config(cfg)
    area = gen_area(random_recipe(_area_seed(seed, index), cfg), grid, cfg)
    path = sample_random_path(area, [seed, index, 3], cfg.path_bbox_prob, cfg.min_path_length)
    # the record stores float32 coordinates; simulate exactly what is stored
    coords = path.as_array().reshape(-1).astype(np.float32)
    path = DispensePath.from_array(coords.astype(np.float64))
    try:
        path = path.with_feedrate(feedrate_for(path, area, cfg.min_path_length))
    except ZeroLengthPath:
        return None
    path = path.with_feedrate(float(np.float32(path.feedrate)))
    report, sim = simulate_and_score(path, area, cfg.weights, params, cfg.penalty_max)
    if sim is None:
        return None
    return PretrainSample(area.mask.copy(), coords, path.feedrate, sim.footprint, report)


def _area_seed(seed: int, index: int) -> int:
    return int(np.random.default_rng([seed, index, 7]).integers(2**62))


def build_pretrain_set(n: int, seed: int, cfg: Config = Config(), out=None) -> tuple[Dataset, dict]:
    """Generate ``n`` oracle-labelled samples; failed indices are skipped and counted."""
    if n < 1:
        raise DatasetEmpty("n must be at least 1")
    samples, skipped = [], []
    index = 0
    while len(samples) < n:
        s = make_sample(index, seed, cfg)
        if s is None:
            skipped.append(index)
            log.warning("sample %d skipped: oracle did not converge", index)
        else:
            samples.append(s)
        index += 1
    ds = Dataset(cfg.grid, samples)
    stats = dataset_stats(ds)
    stats["skipped"] = len(skipped)
    if out is not None:
        write_dataset(samples, cfg.grid, out)
    log.info("dataset: %s", ", ".join(f"{k}={v}" for k, v in stats.items()))
    return ds, stats


def dataset_stats(ds: Dataset) -> dict:
    q = [s.quality for s in ds.samples]
    if not q:
        return {"count": 0}
    return {
        "count": len(q),
        "coverage_mean": float(np.mean([r.coverage for r in q])),
        "overflow_mean": float(np.mean([r.overflow for r in q])),
        "void_positive_rate": float(np.mean([r.void_count > 0 for r in q])),
        "void_fraction_mean": float(np.mean([r.void_fraction for r in q])),
        "objective_mean": float(np.mean([r.objective for r in q])),
        "area_fraction_mean": float(np.mean([s.mask.mean() for s in ds.samples])),
    }


def format_stats(stats: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in stats.items())
