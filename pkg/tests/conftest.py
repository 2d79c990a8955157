"""Shared oracle helpers for the test suite."""

import math

import numpy as np

from driftdet.sfg import BoxXYXY


def raster_iou(a: BoxXYXY, b: BoxXYXY, field: float = 64.0, res: int = 1024) -> float:
    """IoU by counting pixel centers on a res x res grid over the field.

    Membership along each axis factorizes for axis-aligned boxes, so the
    count is exact (no sampling) and independent of the analytic formula.
    """
    scale = res / field

    def axis_count(lo: float, hi: float) -> int:
        if hi <= lo:
            return 0
        i_lo = max(math.ceil(lo * scale - 0.5), 0)
        i_hi = min(math.ceil(hi * scale - 0.5), res)
        return max(0, i_hi - i_lo)

    area_a = axis_count(a.x1, a.x2) * axis_count(a.y1, a.y2)
    area_b = axis_count(b.x1, b.x2) * axis_count(b.y1, b.y2)
    inter = (axis_count(max(a.x1, b.x1), min(a.x2, b.x2))
             * axis_count(max(a.y1, b.y1), min(a.y2, b.y2)))
    union = area_a + area_b - inter
    return inter / union if union else 0.0


def random_box_pairs(rng: np.random.Generator, n: int, field: float = 64.0,
                     min_side: float = 2.0, max_side: float = 16.0):
    """Pairs positioned so roughly half overlap; sides bounded below so the
    raster grid resolves every box."""
    pairs = []
    for _ in range(n):
        def one(cx=None, cy=None):
            w = rng.uniform(min_side, max_side)
            h = rng.uniform(min_side, max_side)
            if cx is None:
                cx = rng.uniform(w / 2, field - w / 2)
                cy = rng.uniform(h / 2, field - h / 2)
            cx = min(max(cx, w / 2), field - w / 2)
            cy = min(max(cy, h / 2), field - h / 2)
            return BoxXYXY(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), cx, cy

        a, cx, cy = one()
        if rng.uniform() < 0.5:
            jx = cx + rng.uniform(-8, 8)
            jy = cy + rng.uniform(-8, 8)
            b, _, _ = one(jx, jy)
        else:
            b, _, _ = one()
        pairs.append((a, b))
    return pairs
