"""Exact receptive-field analysis for stacks of square convolutions.

The influence set of one output position is computed by composing the
per-layer tap offsets from the top of the stack down: a layer with kernel
k, stride s, dilation r maps an offset set S to {s*x + t} over taps
t = r*(u - (k-1)/2).  Square kernels and isotropic strides make the 2-d
set a product of two identical 1-d sets, so only the 1-d composition is
carried around.

Density is the fraction of the bounding box an output position can
actually see; a stack of equal even dilations leaves checkerboard holes,
while mixed rates fill the box completely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np


@dataclass
class ReceptiveFieldMask:
    """Boolean influence map of one output position, centered on it."""

    grid: np.ndarray           # 2-d bool, odd extents
    extent: Tuple[int, int]    # bounding-box height and width
    reachable: int             # number of true cells
    density: float             # reachable / (extent_h * extent_w)


def receptive_field_mask(layer_stack: Sequence[Tuple[int, int, int]]) -> ReceptiveFieldMask:
    """Influence mask for a stack of (kernel, stride, dilation) layers,
    listed input-first."""
    if len(layer_stack) == 0:
        raise ValueError("layer stack must be nonempty")
    for k, s, r in layer_stack:
        if k < 1 or k % 2 == 0:
            raise ValueError(f"kernel extents must be odd and positive, got {k}")
        if s < 1 or r < 1:
            raise ValueError(f"stride and dilation must be >= 1, got s={s}, r={r}")

    offsets = {0}
    for k, s, r in reversed(layer_stack):
        taps = [r * (u - (k - 1) // 2) for u in range(k)]
        offsets = {s * x + t for x in offsets for t in taps}

    radius = max(offsets)
    extent = 2 * radius + 1
    line = np.zeros(extent, dtype=bool)
    for o in offsets:
        line[o + radius] = True
    grid = np.outer(line, line)
    reachable = int(grid.sum())
    return ReceptiveFieldMask(grid=grid, extent=(extent, extent),
                              reachable=reachable,
                              density=reachable / (extent * extent))


def stack_from_rates(rates: Sequence[int], kernel: int = 3) -> list:
    """Stride-1 convolution stack with one layer per dilation rate."""
    return [(kernel, 1, r) for r in rates]


def density_table(schedules: dict) -> list:
    """Rows (name, rates, reachable, bounding_box, density) for the given
    {name: rates} mapping."""
    rows = []
    for name, rates in schedules.items():
        mask = receptive_field_mask(stack_from_rates(rates))
        area = mask.extent[0] * mask.extent[1]
        rows.append((name, tuple(rates), mask.reachable, area, mask.density))
    return rows
