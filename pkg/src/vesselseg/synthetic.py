"""Procedural dark-branch imagery for smoke tests and the desk-scale
study: meandering strokes over a textured bright background, with exact
per-pixel labels."""

from __future__ import annotations

import math
from typing import List, Tuple

import numpy as np

from .rng import Rng


def _stamp_disk(mask: np.ndarray, row: float, col: float, radius: float) -> None:
    size = mask.shape[0]
    r0 = max(0, int(math.floor(row - radius)))
    r1 = min(size - 1, int(math.ceil(row + radius)))
    c0 = max(0, int(math.floor(col - radius)))
    c1 = min(size - 1, int(math.ceil(col + radius)))
    for i in range(r0, r1 + 1):
        for j in range(c0, c1 + 1):
            if (i - row) ** 2 + (j - col) ** 2 <= radius * radius:
                mask[i, j] = 1


def _draw_stroke(rng: Rng, mask: np.ndarray, row: float, col: float,
                 angle: float, length: int, radius: float,
                 branches: List) -> None:
    size = mask.shape[0]
    for step in range(length):
        _stamp_disk(mask, row, col, radius)
        row += math.sin(angle)
        col += math.cos(angle)
        angle += (rng.uniform() - 0.5) * 0.5
        if row < -4 or row > size + 4 or col < -4 or col > size + 4:
            break
        if radius > 0.9 and step > 10 and rng.uniform() < 0.02:
            branches.append((row, col, angle + (rng.uniform() - 0.5) * 2.0,
                             length - step, radius * 0.7))


def synthetic_sample(rng: Rng, size: int = 128) -> Tuple[np.ndarray, np.ndarray]:
    """One (size,size,3) uint8 image and its (size,size) {0,1} label."""
    if size < 16:
        raise ValueError("size must be at least 16")
    ramp = np.linspace(0.0, 1.0, size)
    a, b = rng.uniform(), rng.uniform()
    background = 150.0 + 25.0 * (a * ramp[None, :] + b * ramp[:, None])
    background = background + 8.0 * rng.normal_array((1, 1, size, size))[0, 0]

    mask = np.zeros((size, size), dtype=np.uint8)
    branches: List = []
    strokes = 3 + rng.randint(3)
    for _ in range(strokes):
        edge = rng.randint(4)
        offset = rng.uniform() * size
        if edge == 0:
            row, col, angle = 0.0, offset, math.pi / 2
        elif edge == 1:
            row, col, angle = size - 1.0, offset, -math.pi / 2
        elif edge == 2:
            row, col, angle = offset, 0.0, 0.0
        else:
            row, col, angle = offset, size - 1.0, math.pi
        angle += (rng.uniform() - 0.5) * 1.2
        radius = 0.6 + 1.2 * rng.uniform()
        _draw_stroke(rng, mask, row, col, angle, int(size * 1.4), radius, branches)
    while branches:
        row, col, angle, length, radius = branches.pop()
        _draw_stroke(rng, mask, row, col, angle, length, radius, branches)

    depth = 90.0 + 20.0 * rng.uniform()
    gray = background - depth * mask
    tint = np.array([1.0, 0.82, 0.68])
    image = gray[:, :, None] * tint[None, None, :]
    image = image + 4.0 * rng.normal_array((1, 3, size, size))[0].transpose(1, 2, 0)
    image = np.clip(np.rint(image), 0.0, 255.0).astype(np.uint8)
    return image, mask


def make_dataset(seed: int, count: int, size: int = 128):
    """Deterministic list of (image, label) pairs from one seed."""
    rng = Rng(seed)
    images, gts = [], []
    for _ in range(count):
        img, gt = synthetic_sample(rng, size)
        images.append(img)
        gts.append(gt)
    return images, gts
