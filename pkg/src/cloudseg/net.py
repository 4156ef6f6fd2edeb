"""Compact U-Net with hand-derived backward passes, pure numpy.

Architecture (fixed up to the channel plan in the config):
  encoder stage s: 2 x [3x3 conv -> instance norm -> leaky ReLU(0.01)],
  the first conv of stages s >= 1 downsamples with stride 2;
  decoder stage s: kernel-2 stride-2 transposed conv, concat with the
  encoder skip, then 2 conv blocks; final 1x1 conv to 2 logits.

All convolutions are zero-padded so 3x3 convs preserve shape; logits
therefore share the input's spatial dims. Everything is dtype-generic:
f32 in production, f64 for the finite-difference reference path.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ArgumentError
from . import raster

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


# --- im2col machinery -----------------------------------------------------

def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, k, k, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride)
    )
    return np.ascontiguousarray(view).reshape(n, c * k * k, ho * wo), (ho, wo)


def _col2im(cols, x_shape, k, stride, pad, ho, wo):
    n, c, h, w = x_shape
    cols6 = cols.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                cols6[:, :, i, j]
            )
    if pad:
        return xp[:, :, pad : h + pad, pad : w + pad]
    return xp


# --- layers ---------------------------------------------------------------

class Conv2d:
    def __init__(self, cin, cout, k=3, stride=1, pad=1, dtype=np.float32):
        self.cin, self.cout, self.k, self.stride, self.pad = cin, cout, k, stride, pad
        self.W = np.zeros((cout, cin, k, k), dtype=dtype)
        self.b = np.zeros(cout, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    def init(self, rng):
        fan_in = self.cin * self.k * self.k
        self.W[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), self.W.shape)
        self.b[...] = 0.0

    def forward(self, x):
        cols, (ho, wo) = _im2col(x, self.k, self.stride, self.pad)
        w2 = self.W.reshape(self.cout, -1)
        y = np.matmul(w2, cols) + self.b[None, :, None]
        self._cache = (x.shape, cols, ho, wo)
        return y.reshape(x.shape[0], self.cout, ho, wo)

    def backward(self, gy):
        x_shape, cols, ho, wo = self._cache
        n = gy.shape[0]
        gy2 = gy.reshape(n, self.cout, ho * wo)
        self.gW[...] = np.einsum("nol,nkl->ok", gy2, cols).reshape(self.W.shape)
        self.gb[...] = gy2.sum(axis=(0, 2))
        gcols = np.matmul(self.W.reshape(self.cout, -1).T, gy2)
        return _col2im(gcols, x_shape, self.k, self.stride, self.pad, ho, wo)

    def params(self, prefix):
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}

    def grads(self, prefix):
        return {f"{prefix}.W": self.gW, f"{prefix}.b": self.gb}


class ConvTranspose2d:
    """Kernel-2 stride-2 transposed conv: exact x2 upsampling."""

    def __init__(self, cin, cout, dtype=np.float32):
        self.cin, self.cout = cin, cout
        self.W = np.zeros((cin, cout, 2, 2), dtype=dtype)
        self.b = np.zeros(cout, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    def init(self, rng):
        fan_in = self.cin * 4
        self.W[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), self.W.shape)
        self.b[...] = 0.0

    def forward(self, x):
        n, c, h, w = x.shape
        t = np.einsum("nchw,cdab->ndhawb", x, self.W)
        y = t.reshape(n, self.cout, 2 * h, 2 * w) + self.b[None, :, None, None]
        self._cache = x
        return y

    def backward(self, gy):
        x = self._cache
        n, c, h, w = x.shape
        g6 = gy.reshape(n, self.cout, h, 2, w, 2)
        self.gW[...] = np.einsum("nchw,ndhawb->cdab", x, g6)
        self.gb[...] = gy.sum(axis=(0, 2, 3))
        return np.einsum("ndhawb,cdab->nchw", g6, self.W)

    def params(self, prefix):
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}

    def grads(self, prefix):
        return {f"{prefix}.W": self.gW, f"{prefix}.b": self.gb}


class InstanceNorm:
    """Per-sample, per-channel normalization over HxW with affine params."""

    def __init__(self, c, dtype=np.float32):
        self.scale = np.ones(c, dtype=dtype)
        self.shift = np.zeros(c, dtype=dtype)
        self.gscale = np.zeros_like(self.scale)
        self.gshift = np.zeros_like(self.shift)
        self._cache = None

    def forward(self, x):
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + np.asarray(NORM_EPS, dtype=x.dtype))
        xhat = (x - mu) * inv_std
        self._cache = (xhat, inv_std)
        return self.scale[None, :, None, None] * xhat + self.shift[None, :, None, None]

    def backward(self, gy):
        xhat, inv_std = self._cache
        self.gscale[...] = (gy * xhat).sum(axis=(0, 2, 3))
        self.gshift[...] = gy.sum(axis=(0, 2, 3))
        gxhat = gy * self.scale[None, :, None, None]
        m1 = gxhat.mean(axis=(2, 3), keepdims=True)
        m2 = (gxhat * xhat).mean(axis=(2, 3), keepdims=True)
        return inv_std * (gxhat - m1 - xhat * m2)

    def params(self, prefix):
        return {f"{prefix}.scale": self.scale, f"{prefix}.shift": self.shift}

    def grads(self, prefix):
        return {f"{prefix}.scale": self.gscale, f"{prefix}.shift": self.gshift}


class LeakyReLU:
    def forward(self, x):
        self._mask = np.where(x > 0, x.dtype.type(1.0), x.dtype.type(LEAKY_SLOPE))
        return x * self._mask

    def backward(self, gy):
        return gy * self._mask


class ConvBlock:
    """conv -> instance norm -> leaky ReLU."""

    def __init__(self, cin, cout, stride=1, dtype=np.float32):
        self.conv = Conv2d(cin, cout, k=3, stride=stride, pad=1, dtype=dtype)
        self.norm = InstanceNorm(cout, dtype=dtype)
        self.act = LeakyReLU()

    def init(self, rng):
        self.conv.init(rng)

    def forward(self, x):
        return self.act.forward(self.norm.forward(self.conv.forward(x)))

    def backward(self, gy):
        return self.conv.backward(self.norm.backward(self.act.backward(gy)))

    def params(self, prefix):
        return {**self.conv.params(f"{prefix}.conv"), **self.norm.params(f"{prefix}.norm")}

    def grads(self, prefix):
        return {**self.conv.grads(f"{prefix}.conv"), **self.norm.grads(f"{prefix}.norm")}


# --- the model ------------------------------------------------------------

class UNetModel:
    def __init__(self, config, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        ch = config.channels_per_stage
        d = config.n_downsamplings

        self.enc = []
        prev = config.in_bands
        for s in range(d + 1):
            stride = 2 if s > 0 else 1
            self.enc.append(
                (ConvBlock(prev, ch[s], stride=stride, dtype=dtype),
                 ConvBlock(ch[s], ch[s], dtype=dtype))
            )
            prev = ch[s]

        self.up = []
        self.dec = []
        for s in range(d - 1, -1, -1):
            self.up.append(ConvTranspose2d(ch[s + 1], ch[s], dtype=dtype))
            self.dec.append(
                (ConvBlock(2 * ch[s], ch[s], dtype=dtype),
                 ConvBlock(ch[s], ch[s], dtype=dtype))
            )

        self.head = Conv2d(ch[0], 2, k=1, stride=1, pad=0, dtype=dtype)
        self._forward_valid = False

    def _units(self):
        for s, (b0, b1) in enumerate(self.enc):
            yield f"enc{s}.block0", b0
            yield f"enc{s}.block1", b1
        d = self.config.n_downsamplings
        for i, (up, (b0, b1)) in enumerate(zip(self.up, self.dec)):
            s = d - 1 - i
            yield f"dec{s}.up", up
            yield f"dec{s}.block0", b0
            yield f"dec{s}.block1", b1
        yield "head", self.head

    def parameters(self):
        out = {}
        for name, unit in self._units():
            out.update(unit.params(name))
        return out

    def gradients(self):
        out = {}
        for name, unit in self._units():
            out.update(unit.grads(name))
        return out

    def forward(self, x):
        """x: (N, bands, H, W) with H, W divisible by 2^d. Returns logits
        (N, 2, H, W); activations needed by backward stay cached inside."""
        x = np.asarray(x, dtype=self.dtype)
        d = self.config.n_downsamplings
        if x.ndim != 4 or x.shape[1] != self.config.in_bands:
            raise ArgumentError(f"expected (N,{self.config.in_bands},H,W), got {x.shape}")
        if x.shape[2] % 2**d or x.shape[3] % 2**d:
            raise ArgumentError(f"spatial dims {x.shape[2:]} not divisible by 2^{d}")

        skips = []
        for b0, b1 in self.enc:
            x = b1.forward(b0.forward(x))
            skips.append(x)
        self._skip_shapes = [s.shape for s in skips]
        for i, (up, (b0, b1)) in enumerate(zip(self.up, self.dec)):
            s = self.config.n_downsamplings - 1 - i
            x = up.forward(x)
            x = np.concatenate([x, skips[s]], axis=1)
            x = b1.forward(b0.forward(x))
        logits = self.head.forward(x)
        self._forward_valid = True
        return logits

    def backward(self, grad_logits):
        """Analytic gradients for all parameters; consumes the forward cache."""
        if not self._forward_valid:
            raise ArgumentError("backward called without a matching forward (stale cache)")
        self._forward_valid = False

        g = self.head.backward(np.asarray(grad_logits, dtype=self.dtype))
        skip_grads = [np.zeros(sh, dtype=self.dtype) for sh in self._skip_shapes]
        for i in range(len(self.up) - 1, -1, -1):
            s = self.config.n_downsamplings - 1 - i
            up, (b0, b1) = self.up[i], self.dec[i]
            g = b0.backward(b1.backward(g))
            c_up = self._skip_shapes[s][1]  # upsampled half of the concat
            g_up, g_skip = g[:, :c_up], g[:, c_up:]
            skip_grads[s] += g_skip
            g = up.backward(g_up)
        # g now flows into the deepest encoder stage output
        skip_grads[-1] += g
        g = None
        for s in range(len(self.enc) - 1, -1, -1):
            b0, b1 = self.enc[s]
            g = b0.backward(b1.backward(skip_grads[s]))
            if s > 0:
                skip_grads[s - 1] += g
        return self.gradients()

    def zero_grads(self):
        for g in self.gradients().values():
            g[...] = 0.0

    def n_parameters(self):
        return sum(p.size for p in self.parameters().values())


def init_params(config, seed, dtype=np.float32):
    """He-normal fan-in conv weights, zero biases, identity norm affine;
    fully determined by (config, seed)."""
    model = UNetModel(config, dtype=dtype)
    rng = np.random.default_rng(seed)
    for _, unit in model._units():
        if hasattr(unit, "init"):
            unit.init(rng)
    return model


def unet_forward(model, batch):
    return model.forward(batch)


def unet_backward(model, grad_logits):
    return model.backward(grad_logits)


def instance_norm(x, scale, shift):
    """Standalone functional instance norm (forward only)."""
    layer = InstanceNorm(x.shape[1], dtype=x.dtype)
    layer.scale[...] = scale
    layer.shift[...] = shift
    return layer.forward(np.asarray(x))


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(model, directory):
    os.makedirs(directory, exist_ok=True)
    names = []
    for name, arr in model.parameters().items():
        fname = name.replace(".", "_") + ".cseg"
        raster.save_tensor(arr.astype(np.float32), os.path.join(directory, fname))
        names.append({"param": name, "file": fname})
    index = {"config_hash": model.config.config_hash(), "tensors": names}
    with open(os.path.join(directory, "index.json"), "w", encoding="utf-8") as f:
        json.dump(index, f, sort_keys=True, indent=2)


def load_checkpoint(config, directory):
    with open(os.path.join(directory, "index.json"), encoding="utf-8") as f:
        index = json.load(f)
    if index["config_hash"] != config.config_hash():
        raise ArgumentError(
            f"checkpoint {directory} was written for a different config"
        )
    model = UNetModel(config)
    params = model.parameters()
    for entry in index["tensors"]:
        arr = raster.load_tensor(os.path.join(directory, entry["file"]))
        params[entry["param"]][...] = arr
    return model
