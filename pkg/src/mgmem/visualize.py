"""Memory-state imaging: grayscale PGM exports and correlation probes."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import numpy as np

from mgmem.layers import MemoryState


def normalize_to_bytes(values: np.ndarray) -> np.ndarray:
    """Min-max scale to uint8; a constant field maps to mid-gray (128)."""
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.full(values.shape, 128, dtype=np.uint8)
    scaled = (values - lo) / (hi - lo) * 255.0
    return np.rint(scaled).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5), 8-bit, row-major."""
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("write_pgm needs a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise ValueError("not a binary PGM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        if int(f.readline()) != 255:
            raise ValueError("unsupported max value")
        return np.frombuffer(f.read(w * h), dtype=np.uint8).reshape(h, w)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6) for color overlays; image is (h, w, 3) uint8."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("write_ppm needs an (h, w, 3) uint8 array")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def memory_plane(state: MemoryState, level: int, channel: Optional[int] = None,
                 batch_index: int = 0) -> np.ndarray:
    """Hidden-state grid at one level: a single channel, or the per-pixel
    max of absolute values across channels when no channel is given."""
    grid = state.h[level].data[batch_index]
    if grid.size == 0:
        raise ValueError("empty hidden grid")
    if channel is not None:
        return np.asarray(grid[:, :, channel], dtype=np.float64)
    return np.abs(grid).max(axis=2).astype(np.float64)


def export_memory_visual(state: MemoryState, level: int, out_path,
                         channel: Optional[int] = None,
                         batch_index: int = 0) -> np.ndarray:
    """Write a PGM of one hidden grid plus a CSV of the raw values.

    Returns the uint8 image.  The CSV lands next to the image with a
    ``.csv`` suffix.
    """
    plane = memory_plane(state, level, channel, batch_index)
    image = normalize_to_bytes(plane)
    out_path = Path(out_path)
    write_pgm(out_path, image)
    with open(out_path.with_suffix(".csv"), "w", newline="") as f:
        writer = csv.writer(f)
        for row in plane:
            writer.writerow([repr(float(v)) for v in row])
    return image


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two equally shaped arrays; 0 when degenerate."""
    x = a.reshape(-1).astype(np.float64)
    y = b.reshape(-1).astype(np.float64)
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        return 0.0
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def best_channel_correlation(state: MemoryState, level: int, reference: np.ndarray,
                             batch_index: int = 0) -> tuple[int, float]:
    """Channel of the hidden grid whose |Pearson r| against ``reference``
    is largest; the grid is center-cropped to the reference size."""
    grid = state.h[level].data[batch_index]
    rows, cols = reference.shape
    r0 = (grid.shape[0] - rows) // 2
    c0 = (grid.shape[1] - cols) // 2
    crop = grid[r0:r0 + rows, c0:c0 + cols, :]
    best_c, best_r = 0, 0.0
    for c in range(crop.shape[2]):
        r = abs(pearson(crop[:, :, c], reference))
        if r > best_r:
            best_c, best_r = c, r
    return best_c, best_r
