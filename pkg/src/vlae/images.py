"""Image-grid emission as binary PGM/PPM files.

Netpbm output is dependency-free and byte-stable, so grid files can be
compared exactly in tests. Grid pixel dimensions are
(cols * (W + pad)) x (rows * (H + pad)): each cell carries its padding on
the right and bottom.
"""

from __future__ import annotations

import numpy as np

__all__ = ["make_grid", "write_netpbm", "write_grid"]


def make_grid(images: np.ndarray, cols: int, pad: int = 1, pad_value: float = 0.5) -> np.ndarray:
    """Tile (N, C, H, W) images into a (C, rows*(H+pad), cols*(W+pad)) array."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    n, c, h, w = images.shape
    cols = max(1, min(cols, n))
    rows = (n + cols - 1) // cols
    if n == 1:
        pad = 0  # single image: no padding row or column
    grid = np.full((c, rows * (h + pad), cols * (w + pad)), pad_value)
    for i in range(n):
        r, col = divmod(i, cols)
        grid[:, r * (h + pad): r * (h + pad) + h,
             col * (w + pad): col * (w + pad) + w] = images[i]
    return grid


def write_netpbm(path, grid: np.ndarray) -> None:
    """Write a (1, H, W) grid as binary PGM (P5) or (3, H, W) as PPM (P6)."""
    grid = np.asarray(grid)
    if grid.ndim == 2:
        grid = grid[None]
    c, h, w = grid.shape
    data = np.clip(np.round(grid * 255.0), 0, 255).astype(np.uint8)
    if c == 1:
        header = f"P5\n{w} {h}\n255\n".encode()
        payload = data[0].tobytes()
    elif c == 3:
        header = f"P6\n{w} {h}\n255\n".encode()
        payload = np.moveaxis(data, 0, -1).tobytes()
    else:
        raise ValueError(f"cannot write {c}-channel image as netpbm")
    with open(path, "wb") as fh:
        fh.write(header + payload)


def write_grid(path, images: np.ndarray, cols: int, pad: int = 1) -> np.ndarray:
    grid = make_grid(images, cols, pad)
    write_netpbm(path, grid)
    return grid
