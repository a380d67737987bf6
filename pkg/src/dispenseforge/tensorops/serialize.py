"""``DFW1`` weight files.

Layout: the magic ``DFW1`` followed by one record per parameter until EOF.
A record is ``u16 name_len | name (utf-8) | dtype tag (1 byte) | u8 rank |
u32 dims[rank] | raw little-endian data``. All integers are little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import CorruptWeights

MAGIC = b"DFW1"
_TAGS = {b"f": np.dtype("<f4"), b"d": np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): b"f", np.dtype("float64"): b"d"}


def dumps(named_arrays) -> bytes:
    out = [MAGIC]
    for name, arr in named_arrays:
        arr = np.asarray(getattr(arr, "data", arr))
        tag = _TAG_OF.get(arr.dtype)
        if tag is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)) + raw_name + tag + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    return b"".join(out)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CorruptWeights("missing DFW1 magic")
    pos, result = 4, {}
    end = len(blob)

    def take(n):
        nonlocal pos
        if pos + n > end:
            raise CorruptWeights(f"truncated weights file at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < end:
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8", errors="strict")
        tag = take(1)
        if tag not in _TAGS:
            raise CorruptWeights(f"unknown dtype tag {tag!r} for {name}")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _TAGS[tag]
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(count * dtype.itemsize), dtype=dtype).reshape(dims)
        result[name] = data.astype(dtype.newbyteorder("="))
    return result


def save_weights(model) -> bytes:
    return dumps(model.named_parameters())


def load_weights(model, blob: bytes):
    """Copy the arrays in ``blob`` into ``model``'s parameters, checking names and shapes."""
    arrays = loads(blob)
    params = dict(model.named_parameters())
    missing = [n for n in params if n not in arrays]
    extra = [n for n in arrays if n not in params]
    if missing or extra:
        raise CorruptWeights(f"architecture mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        arr = arrays[name]
        if arr.shape != p.shape or arr.dtype != p.data.dtype:
            raise CorruptWeights(f"parameter {name}: file has {arr.dtype}{arr.shape}, model expects {p.data.dtype}{p.shape}")
        p.data = arr.copy()
    return model
