"""Rule engine turning a dataset fingerprint + memory budget into a full
pipeline configuration.

The rules are deliberately boring and fully deterministic; every decision
is echoed into a human-readable trace so a reviewer can audit why the
emitted plan looks the way it does.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .errors import ArgumentError
from .fingerprint import canonical_json

MAX_DOWNSAMPLINGS = 5
MIN_FEATURE_SIZE = 8
BASE_CHANNELS = 32
CHANNEL_CAP = 512
MIN_PATCH_AXIS = 64   # shrink floor before declaring the budget infeasible
GIB = 2**30


@dataclass(frozen=True)
class MemoryBudget:
    bytes_available: int = 24 * GIB  # 24 GB training card
    safety_factor: float = 0.85

    def __post_init__(self):
        if self.bytes_available <= 0:
            raise ArgumentError("bytes_available must be positive")
        if not 0.0 < self.safety_factor <= 1.0:
            raise ArgumentError("safety_factor must be in (0, 1]")


@dataclass(frozen=True)
class PipelineConfig:
    patch_size: tuple          # (H, W)
    batch_size: int
    n_downsamplings: int
    channels_per_stage: tuple  # encoder channels, stages 0..d
    in_bands: int
    n_folds: int
    epochs: int = 1000
    lr0: float = 0.01
    momentum: float = 0.99
    normalization: str = "zscore_clip_0.5_99.5"
    ensemble: bool = True
    blend: str = "gaussian"
    threshold: float = 0.5

    def to_dict(self):
        d = dict(self.__dict__)
        d["patch_size"] = list(self.patch_size)
        d["channels_per_stage"] = list(self.channels_per_stage)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["patch_size"] = tuple(int(x) for x in d["patch_size"])
        d["channels_per_stage"] = tuple(int(x) for x in d["channels_per_stage"])
        return cls(**d)

    def config_hash(self):
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


def stage_channels(d, base=BASE_CHANNELS, cap=CHANNEL_CAP):
    return tuple(min(base * 2**s, cap) for s in range(d + 1))


def _round_down(x, multiple):
    return (x // multiple) * multiple


def _fit_patch(axes):
    """Largest d <= 5 such that both axes, floored to a multiple of 2^d,
    keep min(patch)/2^d >= MIN_FEATURE_SIZE. Returns (patch, d) or None."""
    for d in range(MAX_DOWNSAMPLINGS, 0, -1):
        m = 2**d
        patch = tuple(_round_down(a, m) for a in axes)
        if min(patch) > 0 and min(patch) // m >= MIN_FEATURE_SIZE:
            return patch, d
    return None


def count_parameters(config):
    """Exact trainable-parameter count of the U-Net built from ``config``.

    Mirrors net.build_unet layer by layer: per-stage double conv blocks
    (first conv strided for stages > 0), kernel-2 stride-2 transposed
    convs in the decoder, instance-norm affine pairs, final 1x1 conv.
    """
    ch = config.channels_per_stage
    d = config.n_downsamplings
    total = 0

    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    def block(cin, cout):
        # conv + instance norm affine (scale, shift)
        return conv(cin, cout, 3) + 2 * cout

    prev = config.in_bands
    for s in range(d + 1):
        total += block(prev, ch[s]) + block(ch[s], ch[s])
        prev = ch[s]
    for s in range(d - 1, -1, -1):
        total += conv(ch[s + 1], ch[s], 2)            # transposed conv
        total += block(2 * ch[s], ch[s]) + block(ch[s], ch[s])
    total += conv(ch[0], 2, 1)                        # output logits
    return total


def estimate_memory(config, batch):
    """Training-memory model: activations (x2 conv activations per stage,
    encoder + decoder, x2 backprop overhead) plus params/grads/momentum."""
    h, w = config.patch_size
    ch = config.channels_per_stage
    d = config.n_downsamplings
    acts = 0
    for s in range(d + 1):
        acts += (h // 2**s) * (w // 2**s) * ch[s] * 2
    for s in range(d - 1, -1, -1):
        acts += (h // 2**s) * (w // 2**s) * ch[s] * 2
    overhead_factor = 2.0
    return 4.0 * batch * overhead_factor * acts + 12.0 * count_parameters(config)


def configure_pipeline(fp, budget, k, base_channels=BASE_CHANNELS, epochs=1000):
    """Derive the full pipeline plan from the fingerprint.

    Returns (PipelineConfig, trace) where trace is a list of rule strings.
    """
    if k not in (4, 5):
        raise ArgumentError(f"fold count must be 4 or 5, got {k}")
    trace = []
    axes = tuple(int(a) for a in fp.median_shape)

    fit = _fit_patch(axes)
    if fit is None:
        raise ArgumentError(f"median shape {axes} too small for any valid network")
    patch, d = fit
    trace.append(
        f"1. patch <- median shape {axes} rounded down to a multiple of 2^{d}: {patch}"
    )
    trace.append(
        f"2. downsamplings d <- {d} (min(patch)/2^d = {min(patch) // 2**d} >= {MIN_FEATURE_SIZE})"
    )

    limit = budget.safety_factor * budget.bytes_available
    while True:
        channels = stage_channels(d, base=base_channels)
        config = PipelineConfig(
            patch_size=patch,
            batch_size=2,
            n_downsamplings=d,
            channels_per_stage=channels,
            in_bands=fp.band_count,
            n_folds=k,
            epochs=epochs,
        )
        trace.append(f"3. channels <- {list(channels)} (base {base_channels}, cap {CHANNEL_CAP})")

        if estimate_memory(config, 2) <= limit:
            batch = 2
            while estimate_memory(config, batch * 2) <= limit:
                batch *= 2
            trace.append(
                f"4. batch <- {batch} (largest power of two with "
                f"{estimate_memory(config, batch) / GIB:.2f} GiB <= {limit / GIB:.2f} GiB)"
            )
            config = PipelineConfig(**{**config.__dict__, "batch_size": batch})
            break

        # Nothing fits even at batch 2: shrink the larger patch axis.
        larger = 0 if patch[0] >= patch[1] else 1
        new_axes = list(patch)
        new_axes[larger] //= 2
        if new_axes[larger] < MIN_PATCH_AXIS:
            raise ArgumentError(
                "dataset/budget incompatible: patch axis would fall below "
                f"{MIN_PATCH_AXIS} before fitting the memory budget"
            )
        fit = _fit_patch(tuple(new_axes))
        if fit is None:
            raise ArgumentError("dataset/budget incompatible: no valid patch remains")
        patch, d = fit
        trace.append(
            f"5. batch 2 exceeds budget; patch halved on axis {larger} -> {patch}, d -> {d}"
        )

    trace.append(
        f"6. training defaults: epochs={epochs}, lr0=0.01, momentum=0.99, "
        "threshold=0.5, gaussian blend, ensemble=true"
    )
    return config, trace


def save_config(config, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(config.to_dict()))


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return PipelineConfig.from_dict(json.load(f))


def save_trace(trace, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(trace) + "\n")
