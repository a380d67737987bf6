"""Layer operations and parameterised layers (NCHW layout).

Convolutions are stride 1 with zero "same" padding, so spatial size is kept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch
from .tensor import DTYPE, Tensor, as_tensor, clip, flatten, log, make, matmul, mean, relu, sigmoid


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (C*k*k, N*H*W) patches for a same-padded k x k kernel."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p : p + h, p : p + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(c * k * k, n * h * w)


def _pad_rows(x: np.ndarray, p: int) -> np.ndarray:
    """(N, C, H, W) -> zero-padded NHWC flattened to (N*Hp*Wp, C)."""
    n, c, h, w = x.shape
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p : p + h, p : p + w, :] = x.transpose(0, 2, 3, 1)
    return xp.reshape(-1, c)


# With enough input channels, a sum of k*k shifted GEMMs over the flattened
# padded image beats building patches: every shift is a contiguous slice.
# Positions that straddle a row edge land in the padding and are cropped.
def _shift_layout(c: int) -> bool:
    return c >= 8


def _conv(x: np.ndarray, weight: np.ndarray):
    """Same-padded correlation; returns (output NCHW, patches or padded rows, shift flag)."""
    n, c, h, w = x.shape
    f, _, k, _ = weight.shape
    if _shift_layout(c):
        p = k // 2
        hp, wp = h + 2 * p, w + 2 * p
        flat = _pad_rows(x, p)
        span = flat.shape[0] - (k - 1) * (wp + 1)
        wt = np.ascontiguousarray(weight.transpose(2, 3, 1, 0))
        out = np.zeros((n * hp * wp, f), dtype=x.dtype)
        acc = out[:span]
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                acc += flat[off : off + span] @ wt[i, j]
        out = out.reshape(n, hp, wp, f)[:, :h, :w, :].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), flat, True
    cols = _im2col(x, k)
    out = (weight.reshape(f, c * k * k) @ cols).reshape(f, n, h, w).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols, False


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation, stride 1, zero "same" padding. ``weight`` is (F, C, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, wc, k, k2 = weight.shape
    if wc != c or k != k2 or k % 2 == 0:
        raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (f,):
        raise ShapeMismatch(f"conv2d: bias {bias.shape} for {f} filters")

    out, cols, shifted = _conv(x.data, weight.data)
    if bias is not None:
        out += bias.data.reshape(1, f, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            if shifted:
                p = k // 2
                hp, wp = h + 2 * p, w + 2 * p
                span = cols.shape[0] - (k - 1) * (wp + 1)
                gfull = np.zeros((n, hp, wp, f), dtype=DTYPE)
                gfull[:, :h, :w, :] = g.transpose(0, 2, 3, 1)
                gfull = gfull.reshape(-1, f)[:span]
                gw = np.empty((f, c, k, k), dtype=DTYPE)
                for i in range(k):
                    for j in range(k):
                        off = i * wp + j
                        gw[:, :, i, j] = (cols[off : off + span].T @ gfull).T
            else:
                gm = g.transpose(1, 0, 2, 3).reshape(f, n * h * w)
                gw = (gm @ cols.T).reshape(weight.shape)
            gw = np.ascontiguousarray(gw)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            # input gradient is a same-conv of g with the flipped, channel-swapped kernel
            flipped = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _conv(g, flipped)[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2 x 2 max pooling, stride 2; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeMismatch(f"maxpool2d: input {x.shape} too small")
    win = (
        x.data[:, :, : 2 * h2, : 2 * w2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, h2, w2, 4), dtype=DTYPE)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[:, :, : 2 * h2, : 2 * w2] = (
            gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        )
        return (gx,)

    return make(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return make(
        out,
        (x,),
        lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),),
        "upsample2d",
    )


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"dense: input {x.shape} vs weight {weight.shape}")
    out = matmul(x, weight)
    return out if bias is None else out + bias


def binary_cross_entropy(p: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Mean BCE of probabilities ``p`` (clamped to ``[eps, 1 - eps]``)."""
    y = as_tensor(target)
    if y.shape != p.shape:
        raise ShapeMismatch(f"bce: prediction {p.shape} vs target {y.shape}")
    pc = clip(p, eps, 1.0 - eps)
    return -mean(y * log(pc) + (1.0 - y) * log(1.0 - pc))


def binary_cross_entropy_with_logits(z: Tensor, target) -> Tensor:
    """Mean BCE computed from logits without forming the probabilities."""
    y = as_tensor(target)
    if y.shape != z.shape:
        raise ShapeMismatch(f"bce: logits {z.shape} vs target {y.shape}")
    x = z.data
    loss = np.maximum(x, 0) - x * y.data + np.log1p(np.exp(-np.abs(x)))
    count = x.size

    def backward(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        e = np.exp(x[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * (s - y.data) / count, None)

    return make(np.asarray(loss.mean(), dtype=DTYPE), (z, y), backward, "bce_logits")


def squared_error(a: Tensor, b) -> Tensor:
    """Mean squared error."""
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"squared_error: {a.shape} vs {b.shape}")
    d = a - b
    return mean(d * d)


# -- parameterised layers ----------------------------------------------------

KINDS = ("conv2d", "maxpool2d", "upsample2d", "dense", "flatten", "activation")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    kernel: int = 0
    activation: str = ""
    init: str = "kaiming"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "dense") and (self.in_features <= 0 or self.out_features <= 0):
            raise ValueError(f"{self.kind} needs positive feature counts")
        if self.kind == "conv2d" and (self.kernel <= 0 or self.kernel % 2 == 0):
            raise ValueError("conv2d kernel size must be positive and odd")
        if self.kind == "activation" and self.activation not in ("relu", "logistic"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def describe(self) -> str:
        if self.kind == "conv2d":
            return f"conv2d({self.in_features}->{self.out_features},{self.kernel}x{self.kernel})"
        if self.kind == "dense":
            return f"dense({self.in_features}->{self.out_features})"
        if self.kind == "activation":
            return self.activation
        return self.kind


def conv(cin, cout, k, init="kaiming") -> LayerSpec:
    return LayerSpec("conv2d", cin, cout, k, init=init)


def fc(cin, cout, init="kaiming") -> LayerSpec:
    return LayerSpec("dense", cin, cout, init=init)


RELU = LayerSpec("activation", activation="relu")
LOGISTIC = LayerSpec("activation", activation="logistic")
POOL = LayerSpec("maxpool2d")
UP = LayerSpec("upsample2d")
FLAT = LayerSpec("flatten")


def _uniform_init(rng: np.random.Generator, shape, fan_in, fan_out, scheme) -> np.ndarray:
    if scheme == "kaiming":
        bound = np.sqrt(6.0 / fan_in)
    elif scheme == "xavier":
        bound = np.sqrt(6.0 / (fan_in + fan_out))
    else:
        raise ValueError(f"unknown init {scheme!r}")
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Sequential:
    """Layers applied in order; parameters named ``<index>.<weight|bias>``."""

    def __init__(self, specs, rng: np.random.Generator | None = None):
        self.specs = tuple(specs)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, Tensor] = {}
        for i, s in enumerate(self.specs):
            if s.kind == "conv2d":
                fan_in, fan_out = s.in_features * s.kernel**2, s.out_features * s.kernel**2
                shape = (s.out_features, s.in_features, s.kernel, s.kernel)
            elif s.kind == "dense":
                fan_in, fan_out = s.in_features, s.out_features
                shape = (s.in_features, s.out_features)
            else:
                continue
            self.params[f"{i}.weight"] = Tensor(_uniform_init(rng, shape, fan_in, fan_out, s.init), True, f"{i}.weight")
            self.params[f"{i}.bias"] = Tensor(np.zeros(s.out_features, DTYPE), True, f"{i}.bias")

    @property
    def architecture(self) -> str:
        return "|".join(s.describe() for s in self.specs)

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def set_trainable(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def __call__(self, x: Tensor) -> Tensor:
        for i, s in enumerate(self.specs):
            x = self.apply_layer(i, s, x)
        return x

    def apply_layer(self, i: int, s: LayerSpec, x: Tensor) -> Tensor:
        if s.kind == "conv2d":
            return conv2d(x, self.params[f"{i}.weight"], self.params[f"{i}.bias"])
        if s.kind == "dense":
            return dense(x, self.params[f"{i}.weight"], self.params[f"{i}.bias"])
        if s.kind == "maxpool2d":
            return maxpool2d(x)
        if s.kind == "upsample2d":
            return upsample2d(x)
        if s.kind == "flatten":
            return flatten(x)
        return relu(x) if s.activation == "relu" else sigmoid(x)
