"""COCO-compatible run-length encoding for binary masks.

Masks are encoded column-major (Fortran order) as alternating run lengths
starting with the number of zeros. The compressed ``counts`` string uses the
standard COCO variable-length scheme: 5 bits per character, offset by 48,
with bit 0x20 as the continuation flag and deltas against ``counts[i-2]``
from the third run onward.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "encode",
    "decode",
    "area",
    "mask_to_counts",
    "counts_to_mask",
    "polygon_to_mask",
]


def mask_to_counts(mask: np.ndarray) -> list[int]:
    """Binary (h, w) mask -> alternating run lengths, column-major, zeros first."""
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    flat = np.asarray(mask, dtype=bool).flatten(order="F")
    counts: list[int] = []
    if flat.size == 0:
        return counts
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    boundaries = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(boundaries).tolist()
    if flat[0]:
        counts.append(0)
    counts.extend(int(r) for r in runs)
    return counts


def counts_to_mask(counts: list[int], height: int, width: int) -> np.ndarray:
    total = int(sum(counts))
    if total != height * width:
        raise ValueError(f"run lengths sum to {total}, expected {height * width}")
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape((height, width), order="F")


def _counts_to_string(counts: list[int]) -> str:
    chars: list[str] = []
    for i, cnt in enumerate(counts):
        x = int(cnt)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = x != -1 if (c & 0x10) else x != 0
            if more:
                c |= 0x20
            chars.append(chr(c + 48))
    return "".join(chars)


def _string_to_counts(s: str) -> list[int]:
    counts: list[int] = []
    p = 0
    n = len(s)
    while p < n:
        x = 0
        k = 0
        more = True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def encode(mask: np.ndarray) -> dict:
    """Encode a binary (h, w) mask as a COCO RLE dict with a compressed string."""
    h, w = mask.shape
    return {"size": [int(h), int(w)], "counts": _counts_to_string(mask_to_counts(mask))}


def decode(rle: dict) -> np.ndarray:
    """Decode a COCO RLE dict (compressed string or raw count list) to a bool mask."""
    h, w = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, str):
        counts = _string_to_counts(counts)
    return counts_to_mask(list(counts), int(h), int(w))


def area(rle: dict) -> int:
    counts = rle["counts"]
    if isinstance(counts, str):
        counts = _string_to_counts(counts)
    return int(sum(counts[1::2]))


def polygon_to_mask(polygons: list[list[float]], height: int, width: int) -> np.ndarray:
    """Rasterize COCO-style polygons ([x0, y0, x1, y1, ...] lists) to a bool mask.

    Even-odd scanline fill sampled at pixel centers; multiple rings are ORed.
    """
    mask = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 3:
            continue
        xs, ys = pts[:, 0], pts[:, 1]
        y_lo = max(int(np.floor(ys.min())), 0)
        y_hi = min(int(np.ceil(ys.max())), height - 1)
        x0, y0 = xs, ys
        x1, y1 = np.roll(xs, -1), np.roll(ys, -1)
        for row in range(y_lo, y_hi + 1):
            cy = row + 0.5
            crossing = (y0 <= cy) != (y1 <= cy)
            if not crossing.any():
                continue
            t = (cy - y0[crossing]) / (y1[crossing] - y0[crossing])
            x_cross = np.sort(x0[crossing] + t * (x1[crossing] - x0[crossing]))
            for xa, xb in zip(x_cross[0::2], x_cross[1::2]):
                lo = max(int(np.ceil(xa - 0.5)), 0)
                hi = min(int(np.floor(xb - 0.5)), width - 1)
                if hi >= lo:
                    mask[row, lo : hi + 1] = True
    return mask
