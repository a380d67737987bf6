"""Independent reference implementations used to check the package."""

from collections import deque

import numpy as np


def border_bfs_voids(footprint):
    """Void mask and count by queue-based flood fill from the border, then component walks."""
    fp = np.asarray(footprint, dtype=bool)
    h, w = fp.shape
    seen = np.zeros_like(fp)
    queue = deque((i, j) for i in range(h) for j in range(w) if (i in (0, h - 1) or j in (0, w - 1)) and not fp[i, j])
    for i, j in queue:
        seen[i, j] = True
    while queue:
        i, j = queue.popleft()
        for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if 0 <= a < h and 0 <= b < w and not fp[a, b] and not seen[a, b]:
                seen[a, b] = True
                queue.append((a, b))
    void = ~fp & ~seen
    count, todo = 0, void.copy()
    for i, j in zip(*np.nonzero(void)):
        if not todo[i, j]:
            continue
        count += 1
        todo[i, j] = False
        stack = [(i, j)]
        while stack:
            a, b = stack.pop()
            for c, d in ((a - 1, b), (a + 1, b), (a, b - 1), (a, b + 1)):
                if 0 <= c < h and 0 <= d < w and todo[c, d]:
                    todo[c, d] = False
                    stack.append((c, d))
    return void, count


def _shift_or(x):
    out = x.copy()
    out[:, 1:] |= x[:, :-1]
    out[:, :-1] |= x[:, 1:]
    out[:, :, 1:] |= x[:, :, :-1]
    out[:, :, :-1] |= x[:, :, 1:]
    return out


def batched_border_voids(footprints):
    """Vectorised border reachability over a stack (N, H, W): void masks and counts.

    Reachability grows one 4-neighbour step per sweep from the empty border
    cells; components of the unreached empty cells are counted by repeated
    minimum-label propagation.
    """
    fp = np.asarray(footprints, dtype=bool)
    empty = ~fp
    reach = np.zeros_like(empty)
    reach[:, 0, :] = empty[:, 0, :]
    reach[:, -1, :] = empty[:, -1, :]
    reach[:, :, 0] = empty[:, :, 0]
    reach[:, :, -1] = empty[:, :, -1]
    while True:
        nxt = _shift_or(reach) & empty
        if np.array_equal(nxt, reach):
            break
        reach = nxt
    void = empty & ~reach
    n, h, w = fp.shape
    big = h * w + 1
    labels = np.where(void, np.arange(h * w).reshape(1, h, w), big)
    while True:
        pad = np.pad(labels, ((0, 0), (1, 1), (1, 1)), constant_values=big)
        nb = np.minimum.reduce([pad[:, :-2, 1:-1], pad[:, 2:, 1:-1], pad[:, 1:-1, :-2], pad[:, 1:-1, 2:], labels])
        nb = np.where(void, nb, big)
        if np.array_equal(nb, labels):
            break
        labels = nb
    counts = np.array([np.unique(l[l < big]).size for l in labels])
    return void, counts
