"""Mask images (PGM), height grids (CSV) and path overlays (SVG)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import DispensePath, GridSpec

TARGET_COLOR = "#2e9e44"
FOOTPRINT_COLOR = "#8c8c8c"
PATH_COLOR = "#fff59d"


def _pgm_tokens(blob: bytes, count: int):
    """First ``count`` whitespace-separated header tokens (``#`` comments skipped) and the data offset."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(blob[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Binary mask from a P2 or P5 PGM; maxval 1 keeps values, otherwise >= 128 is set."""
    blob = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(blob, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == "P2":
        values = np.array(blob[pos:].split()[: w * h], dtype=np.int64)
    elif magic == "P5":
        if maxval > 255:
            raise ValueError("16-bit PGM is not supported")
        values = np.frombuffer(blob, np.uint8, w * h, pos).astype(np.int64)
    else:
        raise ValueError(f"not a PGM file (magic {magic!r})")
    if values.size != w * h:
        raise ValueError("PGM data shorter than its header says")
    img = values.reshape(h, w)
    return img >= 1 if maxval == 1 else img >= 128


def write_pgm(path, mask: np.ndarray) -> None:
    """Plain (P2) PGM with maxval 1."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    rows = "\n".join(" ".join("1" if v else "0" for v in row) for row in mask)
    Path(path).write_text(f"P2\n{w} {h}\n1\n{rows}\n", encoding="ascii")


def write_heights_csv(path, heights: np.ndarray) -> None:
    lines = (",".join(repr(float(v)) for v in row) for row in np.asarray(heights))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_heights_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def _cells_rects(mask: np.ndarray, color: str, cell: float) -> list[str]:
    """One rectangle per horizontal run of set cells."""
    out = []
    for r, row in enumerate(np.asarray(mask, dtype=bool)):
        padded = np.concatenate([[False], row, [False]])
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        for c0, c1 in zip(edges[::2], edges[1::2]):
            out.append(
                f'<rect x="{c0 * cell:g}" y="{r * cell:g}" width="{(c1 - c0) * cell:g}" '
                f'height="{cell:g}" fill="{color}"/>'
            )
    return out


def render_svg(
    target: np.ndarray,
    path: DispensePath | None,
    grid: GridSpec,
    footprint: np.ndarray | None = None,
    caption: str | None = None,
) -> str:
    """Overlay of target (green), footprint (grey, translucent) and path (light yellow).

    Coordinates are in mm with the y axis pointing down the rows, matching
    the mask layout.
    """
    cell = grid.cell_size
    w, h = grid.width_mm, grid.height_mm
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w:g} {h:g}" '
        f'width="{grid.width_cells * 6}" height="{grid.height_cells * 6}">',
        f'<rect x="0" y="0" width="{w:g}" height="{h:g}" fill="#202020"/>',
        '<g id="target">',
        *_cells_rects(target, TARGET_COLOR, cell),
        "</g>",
    ]
    if footprint is not None:
        parts += ['<g id="footprint" opacity="0.6">', *_cells_rects(footprint, FOOTPRINT_COLOR, cell), "</g>"]
    if path is not None:
        pts = " ".join(f"{x:.4f},{y:.4f}" for x, y in path.to_mm(grid))
        parts.append(
            f'<polyline id="path" points="{pts}" fill="none" stroke="{PATH_COLOR}" '
            f'stroke-width="{0.6 * cell:g}" stroke-linejoin="round" stroke-linecap="round"/>'
        )
    if caption:
        parts.append(
            f'<text x="{cell:g}" y="{2.5 * cell:g}" font-size="{2 * cell:g}" fill="white">{caption}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
