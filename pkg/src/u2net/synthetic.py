"""Seeded synthetic image/mask pairs (one bright shape on a textured background)."""

from __future__ import annotations

import numpy as np

from .nn import SeedLike, make_rng

SHAPES = ("disk", "rectangle", "triangle", "ellipse")


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    if kind == "disk":
        r = rng.uniform(0.15, 0.3) * size
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "ellipse":
        ry, rx = rng.uniform(0.12, 0.32, size=2) * size
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if kind == "rectangle":
        hh, hw = rng.uniform(0.12, 0.3, size=2) * size
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    if kind == "triangle":
        r = rng.uniform(0.2, 0.35) * size
        angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
        py, px = cy + r * np.sin(angles), cx + r * np.cos(angles)
        inside = np.ones((size, size), dtype=bool)
        for k in range(3):
            ay, ax, by, bx = py[k], px[k], py[(k + 1) % 3], px[(k + 1) % 3]
            cross = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
            s = np.sign((bx - ax) * (py[(k + 2) % 3] - ay) - (by - ay) * (px[(k + 2) % 3] - ax))
            inside &= cross * s >= 0
        return inside
    raise ValueError(kind)


def shape_dataset(n: int = 8, size: int = 64, seed: SeedLike = 0) -> list:
    """``n`` pairs of (3 x size x size float image in [0,1], 1 x size x size {0,1} mask)."""
    rng = make_rng(seed)
    out = []
    for k in range(n):
        kind = SHAPES[k % len(SHAPES)]
        mask = _shape_mask(kind, size, rng)
        bg = rng.uniform(0.0, 0.45, size=3)
        fg = rng.uniform(0.55, 1.0, size=3)
        yy, xx = np.mgrid[0:size, 0:size] / size
        ramp = 0.15 * (rng.uniform(-1, 1) * yy + rng.uniform(-1, 1) * xx)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None] + ramp[None])
        img = img + rng.normal(0.0, 0.03, size=img.shape)
        out.append((np.clip(img, 0.0, 1.0).astype(np.float32), mask[None].astype(np.float32)))
    return out
