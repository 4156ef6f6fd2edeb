"""Portable tensor I/O, scene/patch bookkeeping and overlay rendering.

The on-disk tensor format ("CSEG") is deliberately tiny and self-describing:

    bytes 0-3   magic  b"CSEG"
    byte  4     version (1)
    byte  5     dtype code: 0=u8, 1=u16, 2=f32
    byte  6     ndim (1..4)
    then        ndim x u32 little-endian dims
    then        row-major payload, little-endian

Masks are uint8 arrays with values {0, 1}; probability maps are float32
arrays in [0, 1].
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ArgumentError,
    TensorCorruptionError,
    TensorFormatError,
    TensorVersionError,
)

MAGIC = b"CSEG"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<f4")}
_CODE_FOR_DTYPE = {np.dtype(np.uint8): 0, np.dtype(np.uint16): 1, np.dtype(np.float32): 2}


def save_tensor(arr, path):
    """Write ``arr`` (u8/u16/f32, 1..4 axes) to ``path`` atomically."""
    arr = np.asarray(arr)
    if arr.dtype not in _CODE_FOR_DTYPE:
        raise ArgumentError(f"unsupported dtype {arr.dtype}; use u8, u16 or f32")
    if not 1 <= arr.ndim <= 4:
        raise ArgumentError(f"ndim must be 1..4, got {arr.ndim}")
    if any(d <= 0 for d in arr.shape):
        raise ArgumentError(f"all dims must be positive, got {arr.shape}")

    header = MAGIC + bytes([VERSION, _CODE_FOR_DTYPE[arr.dtype], arr.ndim])
    header += b"".join(struct.pack("<I", d) for d in arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".cseg.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensor(path):
    """Read a CSEG tensor back into a numpy array."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: not a CSEG tensor (bad magic)")
    version, dtype_code, ndim = raw[4], raw[5], raw[6]
    if version != VERSION:
        raise TensorVersionError(f"{path}: unsupported version {version}")
    if dtype_code not in _DTYPE_CODES:
        raise TensorVersionError(f"{path}: unknown dtype code {dtype_code}")
    if not 1 <= ndim <= 4:
        raise TensorFormatError(f"{path}: ndim {ndim} outside 1..4")
    header_len = 7 + 4 * ndim
    if len(raw) < header_len:
        raise TensorCorruptionError(f"{path}: truncated header")
    dims = struct.unpack(f"<{ndim}I", raw[7:header_len])
    if any(d == 0 for d in dims):
        raise TensorCorruptionError(f"{path}: zero-length dim in {dims}")
    dtype = _DTYPE_CODES[dtype_code]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = raw[header_len:]
    if len(payload) != expected:
        raise TensorCorruptionError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


@dataclass(frozen=True)
class MultiBandPatch:
    """A BxHxW stack of band rasters, the unit of training and inference."""

    values: np.ndarray
    patch_id: str = ""
    scene_id: str = ""

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise ArgumentError(f"patch values must be BxHxW, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 8 or v.shape[2] < 8:
            raise ArgumentError(f"patch too small: {v.shape} (need B>=1, H,W>=8)")

    @property
    def bands(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]


@dataclass(frozen=True)
class PatchGrid:
    """Row-major patch offsets covering a scene."""

    scene_id: str
    scene_h: int
    scene_w: int
    patch_h: int
    patch_w: int
    stride_h: int
    stride_w: int
    offsets: tuple = field(default_factory=tuple)  # ((row, col), ...)


def check_mask(mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ArgumentError(f"mask must be 2-D, got shape {mask.shape}")
    bad = ~np.isin(mask, (0, 1))
    if bad.any():
        raise ArgumentError("mask values must be strictly 0/1")
    return mask.astype(np.uint8)


def _axis_offsets(size, patch, stride):
    offs = list(range(0, size - patch + 1, stride))
    last = size - patch
    if offs[-1] != last:
        offs.append(last)  # clamp the final patch to the scene edge
    return offs


def split_scene(scene, patch_hw, overlap_fraction):
    """Cut a scene into (possibly overlapping) patches, recording offsets.

    Returns (patches, grid). Edge patches are shifted inward so every
    pixel is covered and no padding is ever introduced.
    """
    ph, pw = patch_hw
    sh, sw = scene.height, scene.width
    if ph > sh or pw > sw:
        raise ArgumentError(f"patch {ph}x{pw} larger than scene {sh}x{sw}")
    if not 0.0 <= overlap_fraction < 1.0:
        raise ArgumentError(f"overlap_fraction must be in [0,1), got {overlap_fraction}")

    stride_h = max(1, int(ph * (1.0 - overlap_fraction)))
    stride_w = max(1, int(pw * (1.0 - overlap_fraction)))
    offsets = tuple(
        (r, c)
        for r in _axis_offsets(sh, ph, stride_h)
        for c in _axis_offsets(sw, pw, stride_w)
    )
    grid = PatchGrid(scene.scene_id, sh, sw, ph, pw, stride_h, stride_w, offsets)
    patches = [
        MultiBandPatch(
            scene.values[:, r : r + ph, c : c + pw],
            patch_id=f"{scene.patch_id or scene.scene_id}_r{r}_c{c}",
            scene_id=scene.scene_id,
        )
        for r, c in offsets
    ]
    return patches, grid


def gaussian_patch_weights(patch_h, patch_w):
    """Separable Gaussian window centered in the patch, sigma = size/8.

    Floor-clamped at 1e-3 of the peak so the stitching normalizer never
    vanishes.
    """
    def axis(n):
        sigma = n / 8.0
        x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        return np.exp(-0.5 * (x / sigma) ** 2)

    w = np.outer(axis(patch_h), axis(patch_w))
    w /= w.max()
    return np.maximum(w, 1e-3)


def stitch_scene(maps, grid, blend="gaussian"):
    """Blend per-patch probability maps back into a scene-sized map."""
    if len(maps) != len(grid.offsets):
        raise ArgumentError(f"{len(maps)} maps for {len(grid.offsets)} grid entries")
    if blend not in ("uniform", "gaussian"):
        raise ArgumentError(f"unknown blend {blend!r}")

    ph, pw = grid.patch_h, grid.patch_w
    if blend == "gaussian":
        weight = gaussian_patch_weights(ph, pw)
    else:
        weight = np.ones((ph, pw), dtype=np.float64)

    acc = np.zeros((grid.scene_h, grid.scene_w), dtype=np.float64)
    norm = np.zeros_like(acc)
    for m, (r, c) in zip(maps, grid.offsets):
        m = np.asarray(m)
        if m.shape != (ph, pw):
            raise ArgumentError(f"map shape {m.shape} != patch {(ph, pw)}")
        acc[r : r + ph, c : c + pw] += weight * m
        norm[r : r + ph, c : c + pw] += weight
    return (acc / norm).astype(np.float32)


def _stretch_band(band, lo_pct=2.0, hi_pct=98.0):
    """Percentile-stretch one band to u8, nearest-rank percentiles."""
    flat = np.sort(band.reshape(-1).astype(np.float64))
    n = flat.size
    lo = flat[max(0, int(np.ceil(lo_pct / 100.0 * n)) - 1)]
    hi = flat[max(0, int(np.ceil(hi_pct / 100.0 * n)) - 1)]
    if hi <= lo:
        return np.zeros(band.shape, dtype=np.uint8)
    scaled = np.clip((band.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def _overlay_panel(rgb_u8, mask):
    out = rgb_u8.astype(np.float64)
    cloudy = mask.astype(bool)
    out[cloudy] = 0.5 * out[cloudy] + 0.5 * 255.0
    return np.round(out).astype(np.uint8)


def render_overlay(rgb, mask, gt=None, path="overlay.ppm"):
    """Write an RGB/mask composite (P6 pixmap); triptych when gt is given."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ArgumentError(f"rgb must be 3xHxW, got {rgb.shape}")
    mask = check_mask(mask)
    if mask.shape != rgb.shape[1:]:
        raise ArgumentError(f"mask {mask.shape} does not match rgb {rgb.shape[1:]}")
    stretched = np.stack([_stretch_band(b) for b in rgb], axis=-1)  # HxWx3

    panels = []
    if gt is not None:
        gt = check_mask(gt)
        if gt.shape != mask.shape:
            raise ArgumentError(f"gt {gt.shape} does not match mask {mask.shape}")
        panels.append(stretched)
        panels.append(_overlay_panel(stretched, gt))
    panels.append(_overlay_panel(stretched, mask))
    image = np.concatenate(panels, axis=1)

    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


# --- manifest -------------------------------------------------------------

MANIFEST_KEYS = ("patch_id", "scene_id", "band_paths", "mask_path", "grid_row", "grid_col")


def write_manifest(records, path):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps({k: rec[k] for k in MANIFEST_KEYS}, sort_keys=True))
            f.write("\n")


def read_manifest(path):
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def load_patch(record, base_dir=""):
    """Materialize a manifest record as a MultiBandPatch (+ optional mask)."""
    bands = [load_tensor(os.path.join(base_dir, p)) for p in record["band_paths"]]
    patch = MultiBandPatch(
        np.stack(bands, axis=0),
        patch_id=record["patch_id"],
        scene_id=record["scene_id"],
    )
    mask = None
    if record.get("mask_path"):
        mask = check_mask(load_tensor(os.path.join(base_dir, record["mask_path"])))
    return patch, mask
