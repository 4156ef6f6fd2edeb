"""Patch and scene inference, fold ensembling, binarization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .raster import MultiBandPatch, split_scene, stitch_scene


@dataclass(frozen=True)
class EnsembleModel:
    members: tuple  # UNetModel instances sharing one config

    def __post_init__(self):
        if len(self.members) < 1:
            raise ArgumentError("ensemble needs at least one member")
        hashes = {m.config.config_hash() for m in self.members}
        if len(hashes) != 1:
            raise ArgumentError("ensemble members have mismatching configs")

    @property
    def config(self):
        return self.members[0].config


def _softmax_cloud(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e[:, 1] / e.sum(axis=1)).astype(np.float32)


def predict_patch(model, patch_values):
    """Cloud-probability map for one normalized (B,H,W) band stack."""
    v = np.asarray(patch_values)
    if v.ndim != 3:
        raise ArgumentError(f"expected (B,H,W), got {v.shape}")
    logits = model.forward(v[None])
    model._forward_valid = False  # inference never feeds backward
    return _softmax_cloud(logits)[0]


def ensemble_mean(maps):
    """Arithmetic pixel mean over member probability maps, in list order."""
    if not maps:
        raise ArgumentError("empty map list")
    shape = np.asarray(maps[0]).shape
    acc = np.zeros(shape, dtype=np.float64)
    for m in maps:
        m = np.asarray(m)
        if m.shape != shape:
            raise ArgumentError(f"map shape {m.shape} != {shape}")
        acc += m
    return (acc / len(maps)).astype(np.float32)


def ensemble_predict_patch(ensemble, patch_values):
    return ensemble_mean([predict_patch(m, patch_values) for m in ensemble.members])


def sliding_window_predict(ensemble, scene, overlap=0.5, blend="gaussian"):
    """Split the scene at the config's patch size, run every member on
    every patch, average, and stitch back to scene size."""
    ph, pw = ensemble.config.patch_size
    if not isinstance(scene, MultiBandPatch):
        scene = MultiBandPatch(np.asarray(scene))
    patches, grid = split_scene(scene, (ph, pw), overlap)
    maps = [ensemble_predict_patch(ensemble, p.values) for p in patches]
    return stitch_scene(maps, grid, blend=blend)


def binarize(prob_map, threshold=0.5):
    """Cloud where probability >= threshold (ties break toward cloud)."""
    if not 0.0 < threshold < 1.0:
        raise ArgumentError(f"threshold must be in (0,1), got {threshold}")
    return (np.asarray(prob_map) >= threshold).astype(np.uint8)
