"""Central finite-difference gradient checks for the tensor engine."""

import numpy as np

from dispenseforge.tensorops import Tensor


def relative_error(analytic, numeric):
    """Max abs difference over the larger of the two gradient max-norms."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check(fn, arrays, rng, h=1e-2, max_coords=24, wrt=None):
    """Worst relative error of d(sum(fn(*xs) * r))/dx over the checked inputs.

    ``fn`` takes Tensors and returns a Tensor. The projection ``r`` is random
    so every output element matters. Finite differences re-run the float32
    forward pass and accumulate the projection in float64; at most
    ``max_coords`` randomly chosen coordinates of each input are perturbed.
    """
    arrays = [np.asarray(a, dtype=np.float32) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    leaves = [Tensor(a.copy(), requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = fn(*leaves)
    r = rng.standard_normal(out.shape).astype(np.float32)
    (out * Tensor(r)).sum().backward()

    def projected(xs):
        return float(np.sum(fn(*[Tensor(x) for x in xs]).data.astype(np.float64) * r))

    worst = 0.0
    for i in wrt:
        flat = arrays[i].reshape(-1)
        picks = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        numeric = np.empty(len(picks))
        for n, k in enumerate(picks):
            xs = [a.copy() for a in arrays]
            xs[i].reshape(-1)[k] += h
            up = projected(xs)
            xs[i].reshape(-1)[k] -= 2 * h
            down = projected(xs)
            numeric[n] = (up - down) / (2 * h)
        grad = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, relative_error(grad.reshape(-1)[picks].astype(np.float64), numeric))
    return worst


def away_from_kinks(rng, shape, margin=0.05):
    """Normal samples pushed at least ``margin`` away from zero."""
    x = rng.standard_normal(shape)
    return np.where(x >= 0, x + margin, x - margin)


def distinct_values(rng, shape, gap=0.05):
    """Values whose pairwise distance is at least ``gap`` (no ties for max pooling)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(0, gap / 10)).reshape(shape) - n * gap / 2
