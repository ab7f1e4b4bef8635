"""
Bilinear sampling helpers shared by position-embedding interpolation,
attention resizing, the polar transform and stage-2 image zoom.
"""

from typing import Tuple

import numpy as np


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """
    Sample img (H x W or H x W x C) at fractional index coordinates.

    Index (r, c) is the center of pixel r, c. Neighbors outside the image
    contribute zero.
    """
    h, w = img.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = ys - y0
    wx = xs - x0

    out = np.zeros(ys.shape + img.shape[2:], dtype=np.float64)
    for dy, fy in ((0, 1.0 - wy), (1, wy)):
        for dx, fx in ((0, 1.0 - wx), (1, wx)):
            yy = y0 + dy
            xx = x0 + dx
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            weight = np.where(inside, fy * fx, 0.0)
            vals = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            if img.ndim == 3:
                weight = weight[..., None]
            out += weight * vals
    return out


def resize_grid(field: np.ndarray, new_shape: Tuple[int, int]) -> np.ndarray:
    """
    Bilinear resample of a (rows, cols[, C]) field with corner alignment:
    the four corner cells map onto the four corner cells of the new grid.
    """
    rows, cols = field.shape[:2]
    new_rows, new_cols = new_shape
    if rows < 1 or cols < 1 or new_rows < 1 or new_cols < 1:
        raise ValueError(f"degenerate grid {field.shape[:2]} -> {new_shape}")
    if (rows, cols) == (new_rows, new_cols):
        return field.copy()

    ys = np.linspace(0.0, rows - 1, new_rows) if new_rows > 1 else np.array([(rows - 1) / 2.0])
    xs = np.linspace(0.0, cols - 1, new_cols) if new_cols > 1 else np.array([(cols - 1) / 2.0])
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    # clamp so the last row/col never reads past the edge
    y0 = np.minimum(np.floor(yy).astype(np.int64), rows - 1)
    x0 = np.minimum(np.floor(xx).astype(np.int64), cols - 1)
    y1 = np.minimum(y0 + 1, rows - 1)
    x1 = np.minimum(x0 + 1, cols - 1)
    wy = yy - y0
    wx = xx - x0
    if field.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = field[y0, x0] * (1.0 - wx) + field[y0, x1] * wx
    bottom = field[y1, x0] * (1.0 - wx) + field[y1, x1] * wx
    return (top * (1.0 - wy) + bottom * wy).astype(field.dtype, copy=False)


def resize_image(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear image resize with pixel-center alignment and edge clamping"""
    h, w = img.shape[:2]
    if (h, w) == (new_h, new_w):
        return img.copy()
    ys = np.clip((np.arange(new_h) + 0.5) * h / new_h - 0.5, 0.0, h - 1)
    xs = np.clip((np.arange(new_w) + 0.5) * w / new_w - 0.5, 0.0, w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(img.astype(np.float64), yy, xx).astype(img.dtype, copy=False)
