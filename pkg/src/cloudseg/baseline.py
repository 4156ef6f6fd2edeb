"""Classic single-band threshold detector (cirrus-style baseline)."""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError


def otsu_threshold(band, bins=256):
    """Otsu's threshold on a 256-bin histogram of the band values.

    Returns the bin-edge value maximizing between-class variance;
    deterministic for a given band.
    """
    band = np.asarray(band, dtype=np.float64)
    lo, hi = float(band.min()), float(band.max())
    if hi <= lo:
        return lo
    hist, edges = np.histogram(band, bins=bins, range=(lo, hi))
    p = hist.astype(np.float64) / hist.sum()
    omega = np.cumsum(p)
    mu = np.cumsum(p * (np.arange(bins) + 0.5))
    mu_t = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = (mu_t * omega - mu) ** 2 / (omega * (1.0 - omega))
    sigma_b[~np.isfinite(sigma_b)] = -1.0
    k = int(np.argmax(sigma_b))
    return float(edges[k + 1])


def band_threshold(band, tau=None):
    """Cloud where band value >= tau; tau defaults to Otsu's threshold."""
    band = np.asarray(band)
    if band.ndim != 2:
        raise ArgumentError(f"band must be 2-D, got shape {band.shape}")
    if tau is None:
        tau = otsu_threshold(band)
    else:
        info = np.finfo(band.dtype) if np.issubdtype(band.dtype, np.floating) \
            else np.iinfo(band.dtype)
        if not info.min <= tau <= info.max:
            raise ArgumentError(f"tau {tau} outside the band's representable range")
    return (band >= tau).astype(np.uint8)
