"""Dataset fingerprinting and the intensity normalization it prescribes.

The fingerprint is a compact, deterministic summary of the training set
(shapes, per-band intensity statistics, class imbalance). Everything the
configurator decides later is a pure function of this record, so two
machines fingerprinting the same manifest must agree bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DataError
from . import raster

# Percentile pair used for clipping before z-scoring.
CLIP_LO_PCT = 0.5
CLIP_HI_PCT = 99.5

# Pixels pooled for percentile estimation are capped at this count; above
# it, a deterministic every-k-th per-patch subsample is used instead.
PERCENTILE_SAMPLE_CAP = 1_000_000


@dataclass(frozen=True)
class BandStats:
    mean: float
    std: float
    p0_5: float
    p99_5: float


@dataclass(frozen=True)
class DatasetFingerprint:
    n_patches: int
    band_count: int
    median_shape: tuple  # (H, W)
    band_stats: tuple    # one BandStats per band
    class_imbalance: float

    def to_dict(self):
        return {
            "n_patches": self.n_patches,
            "band_count": self.band_count,
            "median_shape": list(self.median_shape),
            "band_stats": [
                {"mean": s.mean, "std": s.std, "p0_5": s.p0_5, "p99_5": s.p99_5}
                for s in self.band_stats
            ],
            "class_imbalance": self.class_imbalance,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            n_patches=int(d["n_patches"]),
            band_count=int(d["band_count"]),
            median_shape=tuple(int(x) for x in d["median_shape"]),
            band_stats=tuple(
                BandStats(s["mean"], s["std"], s["p0_5"], s["p99_5"])
                for s in d["band_stats"]
            ),
            class_imbalance=float(d["class_imbalance"]),
        )


def _format_float(x):
    return float(f"{float(x):.9g}")


def canonical_json(obj):
    """Sorted keys, floats truncated to 9 significant digits."""

    def walk(v):
        if isinstance(v, float):
            return _format_float(v)
        if isinstance(v, dict):
            return {k: walk(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [walk(x) for x in v]
        return v

    return json.dumps(walk(obj), sort_keys=True, indent=2) + "\n"


def _nearest_rank(sorted_values, pct):
    n = sorted_values.size
    rank = max(1, int(np.ceil(pct / 100.0 * n)))
    return float(sorted_values[rank - 1])


def _lower_median(values):
    s = sorted(values)
    return s[(len(s) - 1) // 2]


def compute_fingerprint(records, base_dir=""):
    """Single deterministic pass over the training manifest.

    Means and stds are exact (f64 accumulation in manifest order);
    percentiles use a nearest-rank on a sorted pool, subsampled per patch
    when the dataset exceeds PERCENTILE_SAMPLE_CAP pixels.
    """
    if not records:
        raise ArgumentError("empty manifest")

    band_count = len(records[0]["band_paths"])
    shapes = []
    # Streaming sums per band, f64.
    total = np.zeros(band_count)
    total_sq = np.zeros(band_count)
    n_pix = 0
    cloud_pix = 0
    mask_pix = 0
    pools = [[] for _ in range(band_count)]

    # Subsample stride chosen from the total pixel count, known only after
    # reading shapes; estimate from the first record (patch sizes are
    # near-uniform in practice) and keep it fixed for determinism.
    first_patch, _ = raster.load_patch(records[0], base_dir)
    est_total = first_patch.height * first_patch.width * len(records)
    stride = max(1, est_total // PERCENTILE_SAMPLE_CAP)

    for rec in records:
        if len(rec["band_paths"]) != band_count:
            raise DataError(
                f"{rec['patch_id']}: {len(rec['band_paths'])} bands, expected {band_count}"
            )
        if not rec.get("mask_path"):
            raise DataError(f"{rec['patch_id']}: training record lacks a GT mask")
        patch, mask = raster.load_patch(rec, base_dir)
        if patch.bands != band_count:
            raise DataError(f"{rec['patch_id']}: band count mismatch")
        shapes.append((patch.height, patch.width))
        v = patch.values.astype(np.float64)
        total += v.sum(axis=(1, 2))
        total_sq += (v * v).sum(axis=(1, 2))
        n_pix += patch.height * patch.width
        cloud_pix += int(mask.sum())
        mask_pix += mask.size
        for b in range(band_count):
            pools[b].append(v[b].reshape(-1)[::stride])

    stats = []
    for b in range(band_count):
        pool = np.sort(np.concatenate(pools[b]))
        mean = total[b] / n_pix
        var = max(0.0, total_sq[b] / n_pix - mean * mean)
        stats.append(
            BandStats(
                mean=float(mean),
                std=float(np.sqrt(var)),
                p0_5=_nearest_rank(pool, CLIP_LO_PCT),
                p99_5=_nearest_rank(pool, CLIP_HI_PCT),
            )
        )

    return DatasetFingerprint(
        n_patches=len(records),
        band_count=band_count,
        median_shape=(
            _lower_median([s[0] for s in shapes]),
            _lower_median([s[1] for s in shapes]),
        ),
        band_stats=tuple(stats),
        class_imbalance=cloud_pix / mask_pix,
    )


def normalize_patch(patch, fp):
    """Clip each band to its [p0.5, p99.5] window, then z-score. Output f32."""
    if patch.bands != fp.band_count:
        raise ArgumentError(
            f"patch has {patch.bands} bands, fingerprint expects {fp.band_count}"
        )
    out = np.empty(patch.values.shape, dtype=np.float32)
    for b, s in enumerate(fp.band_stats):
        v = np.clip(patch.values[b].astype(np.float64), s.p0_5, s.p99_5)
        out[b] = ((v - s.mean) / max(s.std, 1e-8)).astype(np.float32)
    return raster.MultiBandPatch(out, patch_id=patch.patch_id, scene_id=patch.scene_id)


def save_fingerprint(fp, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(fp.to_dict()))


def load_fingerprint(path):
    with open(path, encoding="utf-8") as f:
        return DatasetFingerprint.from_dict(json.load(f))
