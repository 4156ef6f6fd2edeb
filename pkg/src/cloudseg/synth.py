"""Deterministic synthetic multiband cloud-scene generator.

Scenes are value-noise backgrounds with band-correlated texture; clouds
are smooth blobs thresholded from low-pass-filtered noise at a quantile
hitting the requested density. Thick clouds brighten every band strongly,
haze blobs at 35% of that strength (but are still ground-truth cloud).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ArgumentError
from . import raster

THICK_BRIGHTNESS = 0.5
HAZE_STRENGTH = 0.35


@dataclass(frozen=True)
class SynthSpec:
    n_scenes: int = 50
    height: int = 128
    width: int = 128
    band_count: int = 4
    cloud_density: float = 0.3
    haze_fraction: float = 0.2
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.height < 64 or self.width < 64:
            raise ArgumentError("scene dims must be >= 64")
        if not 0.0 <= self.cloud_density <= 1.0:
            raise ArgumentError("cloud_density must be in [0, 1]")
        if self.cloud_density > 0.95:
            raise ArgumentError(f"density {self.cloud_density} > 0.95 is unsatisfiable")
        if not 0.0 <= self.haze_fraction <= 1.0:
            raise ArgumentError("haze_fraction must be in [0, 1]")
        if self.n_scenes < 1:
            raise ArgumentError("need at least one scene")


def _blob_mask(rng, shape, density, sigma):
    """Smooth-noise blobs covering ~density of the image."""
    if density <= 0.0:
        return np.zeros(shape, dtype=bool)
    field = gaussian_filter(rng.standard_normal(shape), sigma=sigma)
    level = np.quantile(field, 1.0 - density)
    return field >= level


def generate_scene(spec, index):
    """One (bands, gt) pair, fully determined by (spec.seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    h, w = spec.height, spec.width

    texture = gaussian_filter(rng.standard_normal((h, w)), sigma=h / 8.0)
    texture *= 0.06 / max(1e-12, texture.std())

    d_thick = spec.cloud_density * (1.0 - spec.haze_fraction)
    d_haze = spec.cloud_density * spec.haze_fraction
    thick = _blob_mask(rng, (h, w), d_thick, sigma=h / 12.0)
    haze = _blob_mask(rng, (h, w), d_haze, sigma=h / 12.0)
    gt = (thick | haze).astype(np.uint8)

    bands = np.empty((spec.band_count, h, w), dtype=np.float32)
    for b in range(spec.band_count):
        base = 0.15 + 0.03 * b
        band = base + texture + 0.015 * gaussian_filter(
            rng.standard_normal((h, w)), sigma=h / 16.0
        )
        band = band + THICK_BRIGHTNESS * thick
        band = band + THICK_BRIGHTNESS * HAZE_STRENGTH * (haze & ~thick)
        band = band + rng.normal(0.0, spec.noise_std, (h, w))
        bands[b] = band.astype(np.float32)
    return bands, gt


def generate_synthetic_dataset(spec, out_dir):
    """Write bands + masks as CSEG plus a JSON-lines manifest.

    Returns the manifest records (paths relative to out_dir)."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i in range(spec.n_scenes):
        bands, gt = generate_scene(spec, i)
        scene_id = f"scene{i:04d}"
        band_paths = []
        for b in range(spec.band_count):
            p = f"{scene_id}_b{b}.cseg"
            raster.save_tensor(bands[b], os.path.join(out_dir, p))
            band_paths.append(p)
        mask_path = f"{scene_id}_gt.cseg"
        raster.save_tensor(gt, os.path.join(out_dir, mask_path))
        records.append({
            "patch_id": scene_id,
            "scene_id": scene_id,
            "band_paths": band_paths,
            "mask_path": mask_path,
            "grid_row": 0,
            "grid_col": 0,
        })
    raster.write_manifest(records, os.path.join(out_dir, "manifest.jsonl"))
    return records
