"""Process network, learned quality model and the differentiable rasterizer.

The quality model chains three stages, all differentiable with respect to the
path coordinates:

1. :func:`soft_rasterize` turns the six-point chain into a deposit image,
2. :class:`FlowSurrogateNet` predicts the squeezed footprint probability map,
3. :class:`VoidSurrogateNet` estimates the enclosed-void fraction of that map.

The predicted objective mirrors :func:`dispenseforge.quality.objective`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numba

from . import tensorops as T
from .errors import CorruptWeights, NotPretrained, ZeroLengthPath
from .flow_oracle import DEFAULT_PARAMS, FlowParams
from .geometry import (
    N_COORDS,
    N_POINTS,
    DispensePath,
    GridSpec,
    TargetArea,
    decode_path,
    encode_path,
    feedrate_for,
)
from .quality import DEFAULT_PENALTY, DEFAULT_WEIGHTS, evaluate
from .tensorops import FLAT, POOL, RELU, Sequential, Tensor, conv, fc
from .tensorops.serialize import load_weights, save_weights
from .tensorops.tensor import make

LENGTH_EPS = 1e-3  # cells; keeps segment lengths differentiable at zero

# input scalings for the flow surrogate
DEPOSIT_SCALE = 0.25
FEEDRATE_SCALE = 1.0 / 16.0


def _cell_centers(grid: GridSpec):
    cx = (np.arange(grid.width_cells, dtype=np.float32) + 0.5).reshape(1, 1, 1, -1)
    cy = (np.arange(grid.height_cells, dtype=np.float32) + 0.5).reshape(1, 1, -1, 1)
    return Tensor(cx), Tensor(cy)


def segment_lengths(coords: Tensor, grid: GridSpec) -> Tensor:
    """Per-segment lengths in cells, shape (B, 5)."""
    p = coords.reshape(coords.shape[0], N_POINTS, 2) * Tensor(
        np.array([grid.width_cells, grid.height_cells], np.float32)
    )
    d = p[:, 1:, :] - p[:, :-1, :]
    return T.sqrt((d * d).sum(axis=2) + LENGTH_EPS**2)


def soft_rasterize(coords: Tensor, feedrate, grid: GridSpec, sigma: float = 1.5) -> Tensor:
    """Gaussian splat of a batch of chains onto the grid.

    ``coords`` holds normalized ``(x1, y1, ..., x6, y6)`` rows, shape (B, 12);
    ``feedrate`` (mm^2) is a scalar or a (B,) tensor. Each segment carries
    ``feedrate * length`` of material spread by a Gaussian of the distance to
    the segment, normalized over the grid, so the image sums to ``f * l``.
    Returns volumes per cell (mm^3), shape (B, 1, H, W).
    """
    coords = T.as_tensor(coords)
    if coords.ndim == 1:
        coords = coords.reshape(1, -1)
    b = coords.shape[0]
    if coords.shape[1] != N_COORDS:
        raise ValueError(f"expected {N_COORDS} coordinates per path, got {coords.shape[1]}")
    scale = Tensor(np.array([grid.width_cells, grid.height_cells], np.float32))
    p = coords.reshape(b, N_POINTS, 2) * scale
    a = p[:, :-1, :]
    d = p[:, 1:, :] - a
    ax = a[:, :, 0].reshape(b, N_POINTS - 1, 1, 1)
    ay = a[:, :, 1].reshape(b, N_POINTS - 1, 1, 1)
    dx = d[:, :, 0].reshape(b, N_POINTS - 1, 1, 1)
    dy = d[:, :, 1].reshape(b, N_POINTS - 1, 1, 1)
    len2 = dx * dx + dy * dy + LENGTH_EPS**2
    seg_len = T.sqrt(len2).reshape(b, N_POINTS - 1)

    cx, cy = _cell_centers(grid)
    rx = cx - ax
    ry = cy - ay
    t = T.clip((rx * dx + ry * dy) / len2, 0.0, 1.0)
    ex = rx - t * dx
    ey = ry - t * dy
    kernel = T.exp((ex * ex + ey * ey) * (-0.5 / (sigma * sigma)))  # (B, 5, H, W)
    norm = kernel.sum(axis=(2, 3), keepdims=True)

    f = T.as_tensor(feedrate)
    f = f.reshape(b, 1) if f.size == b else f
    mass = (seg_len * grid.cell_size) * f  # (B, 5) mm^3
    image = (kernel / norm * mass.reshape(b, N_POINTS - 1, 1, 1)).sum(axis=1, keepdims=True)
    return image


def differentiable_feedrate(coords: Tensor, volumes, grid: GridSpec) -> Tensor:
    """f = V / l with ``l`` the (smoothed) chain length in mm, shape (B,)."""
    length = segment_lengths(coords, grid).sum(axis=1) * grid.cell_size
    return T.as_tensor(np.asarray(volumes, np.float32).reshape(-1)) / length


# -- networks ------------------------------------------------------------------


def process_net_specs(grid: GridSpec):
    flat = (grid.height_cells // 2) * (grid.width_cells // 2)
    return (
        conv(1, 32, 3), RELU,
        conv(32, 8, 3), RELU,
        POOL,
        conv(8, 1, 5), RELU,
        FLAT,
        fc(flat, 64), RELU,
        fc(64, 256), RELU,
        fc(256, N_COORDS, init="xavier"),
    )  # fmt: skip


class ProcessNet(Sequential):
    """Target mask (B, 1, H, W) -> 12 raw path values (B, 12)."""

    kind = "process"

    def __init__(self, grid: GridSpec = GridSpec(), seed: int = 0):
        self.grid = grid
        super().__init__(process_net_specs(grid), np.random.default_rng(seed))


class FlowSurrogateNet:
    """(deposit, feedrate) images -> footprint logits, same spatial size.

    Encoder of four 3x3 convs (8, 16, 16, 8 filters) with two poolings, then
    two upsample+conv stages back to full resolution. The last conv also sees
    the raw inputs (skip connection) to keep boundaries sharp.
    """

    kind = "flow"

    def __init__(self, grid: GridSpec = GridSpec(), seed: int = 0):
        if grid.width_cells % 4 or grid.height_cells % 4:
            raise ValueError("flow surrogate needs grid dimensions divisible by 4")
        self.grid = grid
        rng = np.random.default_rng(seed)
        self.encoder = Sequential(
            (conv(2, 8, 3), RELU, conv(8, 16, 3), RELU, POOL, conv(16, 16, 3), RELU, POOL, conv(16, 8, 3), RELU),
            rng,
        )
        self.decoder = Sequential((T.UP, conv(8, 8, 3), RELU, T.UP), rng)
        self.head = Sequential((conv(8 + 2, 1, 3, init="xavier"),), rng)

    @property
    def architecture(self) -> str:
        return f"{self.encoder.architecture}|{self.decoder.architecture}|concat(input)|{self.head.architecture}|logistic"

    def named_parameters(self):
        out = []
        for prefix, part in (("enc", self.encoder), ("dec", self.decoder), ("head", self.head)):
            out += [(f"{prefix}.{n}", p) for n, p in part.named_parameters()]
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool):
        for part in (self.encoder, self.decoder, self.head):
            part.set_trainable(flag)

    def inputs(self, deposit: Tensor, feedrate, grid: GridSpec) -> Tensor:
        fill = deposit * (DEPOSIT_SCALE / (grid.cell_area * grid.gap_height))
        f = T.as_tensor(feedrate).reshape(-1, 1, 1, 1) * (FEEDRATE_SCALE / (grid.cell_size * grid.gap_height))
        ones = Tensor(np.ones((1, 1) + grid.shape, np.float32))
        return T.concat([fill, ones * f], axis=1)

    def logits(self, x: Tensor) -> Tensor:
        h = self.decoder(self.encoder(x))
        return self.head(T.concat([h, x], axis=1))

    def __call__(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.logits(x))


@numba.njit(cache=True)
def _reach_kernel(e, r, idx):
    n, h, w = e.shape
    for k in range(n):
        for i in range(h):
            for j in range(w):
                if i == 0 or j == 0 or i == h - 1 or j == w - 1:
                    r[k, i, j] = e[k, i, j]
                    idx[k, i, j] = i * w + j
        changed = True
        while changed:
            changed = False
            for sweep in range(2):
                for a in range(h):
                    i = a if sweep == 0 else h - 1 - a
                    for b in range(w):
                        j = b if sweep == 0 else w - 1 - b
                        for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                            y, x = i + di, j + dj
                            if y < 0 or x < 0 or y >= h or x >= w:
                                continue
                            rn = r[k, y, x]
                            cand = min(e[k, i, j], rn)
                            if cand > r[k, i, j]:
                                r[k, i, j] = cand
                                idx[k, i, j] = i * w + j if e[k, i, j] <= rn else idx[k, y, x]
                                changed = True


def _border_reach(e: np.ndarray):
    """Bottleneck emptiness from the grid border and the cell that sets it.

    ``e`` is (N, H, W) in [0, 1]. For every cell the result is the best path,
    over 4-connected paths entering from the border, of the minimum emptiness
    along the path (the cell itself included), together with the flat index
    of that minimum. Unreachable cells get 0 and index -1.
    """
    r = np.zeros(e.shape, dtype=e.dtype)
    idx = np.full(e.shape, -1, dtype=np.int64)
    _reach_kernel(np.ascontiguousarray(e), r, idx)
    return r, idx


def enclosure(p: Tensor) -> Tensor:
    """Soft void map of a footprint probability map (B, 1, H, W).

    With emptiness ``e = 1 - p`` and ``r`` the bottleneck emptiness of the
    best border path, the map is ``e * (1 - r)``: exactly the void mask for a
    binary footprint, and graded for soft ones. The gradient of ``r`` flows
    to the bottleneck cell, i.e. the weakest point of an enclosing wall.
    """
    e = 1.0 - p
    b, c, h, w = e.shape
    r, idx = _border_reach(e.data.reshape(b * c, h, w))

    def backward(g):
        g = g.reshape(b * c, h * w)
        out = np.zeros_like(g)
        for k in range(b * c):
            hit = idx[k].reshape(-1) >= 0
            out[k] = np.bincount(idx[k].reshape(-1)[hit], weights=g[k][hit], minlength=h * w)
        return (out.reshape(e.shape).astype(e.data.dtype),)

    reach = make(r.reshape(e.shape), (e,), backward, "border_reach")
    return e * (1.0 - reach)


class VoidSurrogateNet(Sequential):
    """Footprint probability map (B, 1, H, W) -> void logit (B, 1).

    The first conv sees the map and its :func:`enclosure` map. The logistic
    of the output is the probability that the footprint encloses a void;
    scaled by ``void_scale`` it estimates the void fraction.
    """

    kind = "void"

    def __init__(self, grid: GridSpec = GridSpec(), seed: int = 0, void_scale: float = 0.01):
        self.grid = grid
        self.void_scale = float(void_scale)
        flat = 8 * (grid.height_cells // 4) * (grid.width_cells // 4)
        specs = (
            conv(2, 8, 3), RELU, POOL,
            conv(8, 8, 3), RELU, POOL,
            FLAT,
            fc(flat, 32), RELU,
            fc(32, 1, init="xavier"),
        )  # fmt: skip
        super().__init__(specs, np.random.default_rng(seed))

    @property
    def architecture(self) -> str:
        return "concat(enclosure)|" + super().architecture + "|logistic"

    def __call__(self, fp: Tensor) -> Tensor:
        return super().__call__(T.concat([fp, enclosure(fp)], axis=1))

    def probability(self, fp: Tensor) -> Tensor:
        return T.sigmoid(self(fp)).reshape(-1)

    def fraction(self, fp: Tensor) -> Tensor:
        return self.probability(fp) * self.void_scale


@dataclass
class QualityTerms:
    objective: Tensor  # (B,)
    coverage: Tensor
    overflow: Tensor
    void: Tensor
    footprint: Tensor  # (B, 1, H, W) probabilities


class QualityNet:
    """Frozen rasterizer + flow + void surrogates predicting the objective."""

    def __init__(
        self,
        flow: FlowSurrogateNet,
        void: VoidSurrogateNet,
        grid: GridSpec = GridSpec(),
        sigma: float = 1.5,
        weights=DEFAULT_WEIGHTS,
        pretrained: bool = False,
    ):
        self.flow = flow
        self.void = void
        self.grid = grid
        self.sigma = float(sigma)
        self.weights = tuple(float(w) for w in weights)
        self.pretrained = pretrained
        self.freeze()

    def freeze(self):
        self.flow.set_trainable(False)
        self.void.set_trainable(False)

    def named_parameters(self):
        return [(f"flow.{n}", p) for n, p in self.flow.named_parameters()] + [
            (f"void.{n}", p) for n, p in self.void.named_parameters()
        ]

    def parameter_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    def predict_terms(self, masks: np.ndarray, coords: Tensor, footprint: Tensor | None = None) -> QualityTerms:
        """Predicted objective terms for normalized ``coords`` (B, 12) on ``masks`` (B, H, W).

        ``footprint`` bypasses rasterizer and flow surrogate with a given map.
        """
        if not self.pretrained:
            raise NotPretrained("quality surrogates have no pretrained weights")
        masks = np.asarray(masks, np.float32).reshape((-1, 1) + self.grid.shape)
        b = masks.shape[0]
        n_target = masks.sum(axis=(1, 2, 3))
        if footprint is None:
            volumes = n_target * self.grid.cell_area * self.grid.gap_height
            f = differentiable_feedrate(coords, volumes, self.grid)
            deposit = soft_rasterize(coords, f, self.grid, self.sigma)
            footprint = self.flow(self.flow.inputs(deposit, f, self.grid))
        target = Tensor(masks)
        inv_n = Tensor((1.0 / n_target).astype(np.float32))
        cov = (footprint * target).sum(axis=(1, 2, 3)) * inv_n
        over = T.clip((footprint * (1.0 - target)).sum(axis=(1, 2, 3)) * inv_n, None, 1.0)
        void = self.void.fraction(footprint)
        w_c, w_o, w_v = self.weights
        obj = (1.0 - cov) * w_c + over * w_o + void * w_v
        return QualityTerms(obj.reshape(b), cov, over, void, footprint)

    def predict(self, masks: np.ndarray, coords: Tensor) -> Tensor:
        return self.predict_terms(masks, coords).objective


def predict_quality(area: TargetArea, path_raw, quality: QualityNet) -> Tensor:
    """Differentiable predicted objective for 12 raw (pre-logistic) values."""
    raw = T.as_tensor(path_raw).reshape(1, N_COORDS)
    return quality.predict(area.mask[None], T.sigmoid(raw)).reshape(())


def mask_batch(areas) -> np.ndarray:
    return np.stack([a.mask if isinstance(a, TargetArea) else a for a in areas]).astype(np.float32)[:, None]


def infer_raw(net: ProcessNet, masks: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return net(Tensor(np.asarray(masks, np.float32).reshape((-1, 1) + net.grid.shape))).data


def infer_path(area: TargetArea, net: ProcessNet, min_length: float = DEFAULT_PARAMS.min_path_length) -> DispensePath:
    raw = infer_raw(net, area.mask[None])[0]
    path = decode_path(raw)
    try:
        return path.with_feedrate(feedrate_for(path, area, min_length))
    except ZeroLengthPath as exc:
        exc.raw = raw
        raise


def timed_infer(area: TargetArea, net: ProcessNet) -> tuple[DispensePath, float]:
    start = time.perf_counter()
    path = infer_path(area, net)
    return path, (time.perf_counter() - start) * 1000.0


def refine_path(
    area: TargetArea,
    start: DispensePath,
    quality: QualityNet,
    steps: int,
    learning_rate: float = 0.05,
    oracle_every: int = 10,
    params: FlowParams = DEFAULT_PARAMS,
    penalty: float = DEFAULT_PENALTY,
) -> DispensePath:
    """Gradient descent on the raw coordinates through the quality model.

    Iterates are scored with the exact oracle every ``oracle_every`` steps and
    at the end; the best scored path (the start included) is returned, so the
    oracle objective never gets worse than the start's.
    """
    if steps <= 0:
        return start

    def scored(path):
        try:
            path = path.with_feedrate(feedrate_for(path, area, params.min_path_length))
        except ZeroLengthPath:
            return None, np.inf
        return path, evaluate(path, area, quality.weights, params, penalty).objective

    if start.feedrate is None:
        start = start.with_feedrate(feedrate_for(start, area, params.min_path_length))
    best_path = start
    best_j = evaluate(best_path, area, quality.weights, params, penalty).objective
    raw = Tensor(encode_path(start).astype(np.float32), requires_grad=True)
    opt = T.Adam([raw], learning_rate=learning_rate)
    for step in range(1, steps + 1):
        opt.zero_grad()
        predict_quality(area, raw, quality).backward()
        opt.step()
        if step % oracle_every == 0 or step == steps:
            cand, j = scored(decode_path(raw.data))
            if cand is not None and j < best_j:
                best_path, best_j = cand, j
    return best_path


# -- persistence -----------------------------------------------------------------


def _manifest_path(weights_path) -> Path:
    return Path(str(weights_path) + ".manifest")


def write_model(model, weights_path, grid: GridSpec, extra: dict | None = None, config=None):
    """Write ``DFW1`` weights plus a ``key=value`` manifest next to them."""
    weights_path = Path(weights_path)
    weights_path.write_bytes(save_weights(model))
    fields = {
        "kind": model.kind,
        "architecture": model.architecture,
        "grid": f"{grid.width_cells}x{grid.height_cells}",
        "cell_size": repr(grid.cell_size),
        "gap_height": repr(grid.gap_height),
    }
    if config is not None:
        fields["sigma_schedule"] = (
            f"{config.sigma}*{config.sigma_decay}^(epoch//{config.sigma_decay_every}),min={config.sigma_min}"
        )
        fields["objective_weights"] = ",".join(repr(w) for w in config.weights)
    fields.update(extra or {})
    _manifest_path(weights_path).write_text("".join(f"{k}={v}\n" for k, v in fields.items()), encoding="utf-8")


def read_manifest(weights_path) -> dict:
    path = _manifest_path(weights_path)
    if not path.exists():
        raise NotPretrained(f"missing manifest {path}")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def read_model(cls, weights_path, grid: GridSpec, **kwargs):
    weights_path = Path(weights_path)
    if not weights_path.exists():
        raise NotPretrained(f"missing weights file {weights_path}")
    manifest = read_manifest(weights_path)
    model = cls(grid, **kwargs)
    expected = {"kind": model.kind, "grid": f"{grid.width_cells}x{grid.height_cells}"}
    for key, value in expected.items():
        if manifest.get(key) != value:
            raise CorruptWeights(f"{weights_path}: manifest {key}={manifest.get(key)!r}, expected {value!r}")
    if manifest.get("architecture") != model.architecture:
        raise CorruptWeights(f"{weights_path}: architecture differs from this build")
    if cls is VoidSurrogateNet and "void_scale" in manifest:
        model.void_scale = float(manifest["void_scale"])
    load_weights(model, weights_path.read_bytes())
    return model


def load_quality_net(flow_path, void_path, grid: GridSpec, sigma: float, weights=DEFAULT_WEIGHTS) -> QualityNet:
    flow = read_model(FlowSurrogateNet, flow_path, grid)
    void = read_model(VoidSurrogateNet, void_path, grid)
    return QualityNet(flow, void, grid, sigma, weights, pretrained=True)
