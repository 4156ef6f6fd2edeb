"""Table-driven conversion of GeoTIFF patch archives to CSEG + manifest.

Two layouts are supported:

cloud38
    <src>/train_red/red_patch_<p>_<row>_by_<col>_<scene>.TIF (and green/
    blue/nir siblings), <src>/train_gt/gt_patch_....TIF. Grid position
    and scene id are parsed from the patch name.

ocn
    <src>/train_features/<chip>/B02.tif .. B08.tif,
    <src>/train_labels/<chip>.tif. One chip per patch, no grid info.

Band pixels pass through as uint16 unchanged; masks are binarized to
uint8. Patches missing a band are skipped and logged; converting zero
patches is an error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys

import numpy as np
from PIL import Image

from .cseg import save_tensor

log = logging.getLogger("geo_ingest")

CLOUD38_BANDS = ("red", "green", "blue", "nir")
CLOUD38_NAME = re.compile(r"patch_(\d+)_(\d+)_by_(\d+)_(.+)$")
OCN_BANDS = ("B02", "B03", "B04", "B08")

LAYOUTS = {
    "cloud38": {
        "bands": CLOUD38_BANDS,
        "band_path": lambda src, band, stem: _find_tif(
            os.path.join(src, f"train_{band}"), f"{band}_{stem}"
        ),
        "mask_path": lambda src, stem: _find_tif(
            os.path.join(src, "train_gt"), f"gt_{stem}"
        ),
        "list_patches": lambda src: _cloud38_patches(src),
    },
    "ocn": {
        "bands": OCN_BANDS,
        "band_path": lambda src, band, stem: _find_tif(
            os.path.join(src, "train_features", stem), band
        ),
        "mask_path": lambda src, stem: _find_tif(
            os.path.join(src, "train_labels"), stem
        ),
        "list_patches": lambda src: _ocn_patches(src),
    },
}


def _find_tif(directory, stem):
    for ext in (".TIF", ".tif", ".tiff", ".TIFF"):
        p = os.path.join(directory, stem + ext)
        if os.path.exists(p):
            return p
    return None


def _cloud38_patches(src):
    """Patch stems from the red band directory, e.g.
    'patch_192_12_by_13_LC08...' from 'red_patch_192_12_by_13_LC08....TIF'."""
    red_dir = os.path.join(src, "train_red")
    if not os.path.isdir(red_dir):
        raise FileNotFoundError(f"{red_dir}: missing band directory")
    stems = []
    for name in sorted(os.listdir(red_dir)):
        base, ext = os.path.splitext(name)
        if ext.lower() not in (".tif", ".tiff") or not base.startswith("red_"):
            continue
        stems.append(base[len("red_"):])
    return stems


def _ocn_patches(src):
    feat = os.path.join(src, "train_features")
    if not os.path.isdir(feat):
        raise FileNotFoundError(f"{feat}: missing features directory")
    return sorted(
        d for d in os.listdir(feat) if os.path.isdir(os.path.join(feat, d))
    )


def _grid_info(layout, stem):
    if layout == "cloud38":
        m = CLOUD38_NAME.match(stem)
        if m:
            return m.group(4), int(m.group(2)), int(m.group(3))
    return stem, 0, 0


def _read_band_u16(path):
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected single-band raster, got shape {arr.shape}")
    return arr.astype(np.uint16)  # u16 passthrough; smaller dtypes widen losslessly


def convert_archive(src_dir, layout, out_dir):
    """Convert one archive; returns the list of manifest records."""
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}")
    table = LAYOUTS[layout]
    stems = table["list_patches"](src_dir)
    os.makedirs(out_dir, exist_ok=True)

    records = []
    skipped = 0
    for stem in stems:
        band_files = [table["band_path"](src_dir, b, stem) for b in table["bands"]]
        if any(p is None for p in band_files):
            missing = [b for b, p in zip(table["bands"], band_files) if p is None]
            log.warning("skipping %s: missing band(s) %s", stem, ", ".join(missing))
            skipped += 1
            continue

        scene_id, grid_row, grid_col = _grid_info(layout, stem)
        patch_id = stem
        band_paths = []
        for band, path in zip(table["bands"], band_files):
            out_name = f"{patch_id}_{band}.cseg"
            save_tensor(_read_band_u16(path), os.path.join(out_dir, out_name))
            band_paths.append(out_name)

        mask_path = None
        gt_file = table["mask_path"](src_dir, stem)
        if gt_file is not None:
            gt = np.asarray(Image.open(gt_file))
            mask_path = f"{patch_id}_gt.cseg"
            save_tensor((gt > 0).astype(np.uint8), os.path.join(out_dir, mask_path))

        records.append({
            "patch_id": patch_id,
            "scene_id": scene_id,
            "band_paths": band_paths,
            "mask_path": mask_path,
            "grid_row": grid_row,
            "grid_col": grid_col,
        })

    if not records:
        raise RuntimeError(f"no convertible patches found in {src_dir}")

    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    log.info("converted %d patches (%d skipped) -> %s", len(records), skipped, manifest)
    return records


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="Convert a GeoTIFF patch archive to CSEG + manifest"
    )
    parser.add_argument("--layout", choices=sorted(LAYOUTS), required=True)
    parser.add_argument("--src", required=True)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        records = convert_archive(args.src, args.layout, args.out)
    except (FileNotFoundError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {len(records)} records to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
