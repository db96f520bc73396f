"""Array-level resizing and flipping for C x H x W images and masks."""

from __future__ import annotations

import numpy as np

from .tensor import bilinear_matrix


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize over the last two axes."""
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return np.array(arr, copy=True)
    ah = bilinear_matrix(h, out_h)
    aw = bilinear_matrix(w, out_w)
    out = np.matmul(np.matmul(ah, arr.astype(np.float64)), aw.T)
    return out.astype(arr.dtype if arr.dtype.kind == "f" else np.float64)


def nearest_indices(in_size: int, out_size: int) -> np.ndarray:
    src = np.floor((np.arange(out_size) + 0.5) * (in_size / out_size)).astype(np.int64)
    return np.clip(src, 0, in_size - 1)


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize over the last two axes; keeps masks binary."""
    h, w = arr.shape[-2:]
    rows = nearest_indices(h, out_h)
    cols = nearest_indices(w, out_w)
    return arr[..., rows[:, None], cols[None, :]]


def flip_vertical(arr: np.ndarray) -> np.ndarray:
    return arr[..., ::-1, :].copy()


def flip_horizontal(arr: np.ndarray) -> np.ndarray:
    return arr[..., :, ::-1].copy()
