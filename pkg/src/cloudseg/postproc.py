"""Binary morphology and the adaptive open/close post-processing rule."""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError
from .raster import check_mask

SQUARE_3X3 = np.ones((3, 3), dtype=np.uint8)


def _check_se(se):
    se = np.asarray(se, dtype=np.uint8)
    if se.shape != (3, 3):
        raise ArgumentError(f"structuring element must be 3x3, got {se.shape}")
    if not se[1, 1]:
        raise ArgumentError("structuring element center must be set")
    return se


def _shift(mask, dr, dc, fill):
    out = np.full(mask.shape, fill, dtype=mask.dtype)
    h, w = mask.shape
    rs, re = max(0, dr), min(h, h + dr)
    cs, ce = max(0, dc), min(w, w + dc)
    out[rs:re, cs:ce] = mask[rs - dr : re - dr, cs - dc : ce - dc]
    return out


def dilate(mask, se=SQUARE_3X3):
    """OR over the structuring-element neighborhood, zero-padded borders."""
    mask = check_mask(mask)
    se = _check_se(se)
    out = np.zeros_like(mask)
    for i in range(3):
        for j in range(3):
            if se[i, j]:
                out |= _shift(mask, i - 1, j - 1, 0)
    return out


def erode(mask, se=SQUARE_3X3):
    """AND over the structuring-element neighborhood, zero-padded borders."""
    mask = check_mask(mask)
    se = _check_se(se)
    out = np.ones_like(mask)
    for i in range(3):
        for j in range(3):
            if se[i, j]:
                out &= _shift(mask, i - 1, j - 1, 0)
    return out


def opening(mask, se=SQUARE_3X3):
    return dilate(erode(mask, se), se)


def closing(mask, se=SQUARE_3X3):
    return erode(dilate(mask, se), se)


_OPS = {"erode": erode, "dilate": dilate, "open": opening, "close": closing}


def morph(mask, op, se=SQUARE_3X3):
    if op not in _OPS:
        raise ArgumentError(f"unknown morphology op {op!r}")
    return _OPS[op](mask, se)


def adaptive_postprocess(mask, se=SQUARE_3X3):
    """Close when strictly more than half the patch is cloud, open
    otherwise (an exact 50/50 split opens)."""
    mask = check_mask(mask)
    cloud_fraction = mask.mean(dtype=np.float64)
    if cloud_fraction > 0.5:
        return closing(mask, se)
    return opening(mask, se)
