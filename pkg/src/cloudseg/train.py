"""Loss, optimizer, schedule, augmentation, fold splitting, training loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, NumericError
from . import net
from .evaluate import confusion, metrics_from_confusion
from .infer import binarize, predict_patch

DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 1000
    batches_per_epoch: int = 50
    lr0: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 0.0
    seed: int = 0
    batch_size: int = 2

    def __post_init__(self):
        if self.epochs < 0:
            raise ArgumentError("epochs must be >= 0")
        if self.lr0 <= 0:
            raise ArgumentError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ArgumentError("momentum must be in [0, 1)")


@dataclass(frozen=True)
class FoldSplit:
    k: int
    folds: tuple  # tuple of tuples of patch ids; fold i is model i's validation set

    def train_ids(self, i):
        return tuple(pid for j, f in enumerate(self.folds) if j != i for pid in f)

    def val_ids(self, i):
        return self.folds[i]


def softmax2(logits):
    """Stable softmax over the 2-channel axis of (N,2,H,W) logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def dice_ce_loss(logits, gt):
    """0.5 * cross-entropy + 0.5 * (1 - soft Dice of the cloud channel).

    gt: (N,H,W) binary masks. Returns (loss, grad_logits); the Dice sums
    pool over the whole batch.
    """
    logits = np.asarray(logits)
    gt = np.asarray(gt)
    if logits.ndim != 4 or logits.shape[1] != 2 or logits.shape[0] != gt.shape[0] \
            or logits.shape[2:] != gt.shape[1:]:
        raise ArgumentError(f"logits {logits.shape} vs gt {gt.shape}")
    g = gt.astype(logits.dtype)
    probs = softmax2(logits)
    p = probs[:, 1]
    n_total = g.size

    # cross-entropy, mean over all pixels
    eps = np.finfo(logits.dtype).tiny
    p_true = np.where(g > 0.5, p, probs[:, 0])
    ce = -np.log(np.maximum(p_true, eps)).sum() / n_total

    # soft Dice on the cloud channel, batch-pooled
    inter = (p * g).sum()
    denom = p.sum() + g.sum()
    dice = (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    loss = 0.5 * ce + 0.5 * (1.0 - dice)

    # gradients
    onehot = np.stack([1.0 - g, g], axis=1)
    g_ce = (probs - onehot) / n_total            # d(CE)/d(logits)
    # d(1-dice)/dp, then through the 2-class softmax jacobian
    ddice_dp = (2.0 * g * (denom + DICE_SMOOTH) - (2.0 * inter + DICE_SMOOTH)) \
        / (denom + DICE_SMOOTH) ** 2
    dl_dp = 0.5 * (-ddice_dp)                    # includes the 0.5 loss weight
    jac = p * (1.0 - p)
    g_dice = np.stack([-dl_dp * jac, dl_dp * jac], axis=1)
    return float(loss), 0.5 * g_ce + g_dice


def poly_lr(epoch, total, lr0):
    if not 0 <= epoch < total:
        raise ArgumentError(f"epoch {epoch} outside [0, {total})")
    return lr0 * (1.0 - epoch / total) ** 0.9


class SgdNesterov:
    """v <- mu*v - lr*g; theta <- theta + mu*v - lr*g, applied in place."""

    def __init__(self, model):
        self.model = model
        self.velocity = {k: np.zeros_like(p) for k, p in model.parameters().items()}

    def step(self, grads, lr, momentum):
        params = self.model.parameters()
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in layer {name}")
            v = self.velocity[name]
            v *= momentum
            v -= lr * g
            params[name] += momentum * v - lr * g


def sgd_step(model, optimizer, grads, lr, momentum):
    optimizer.step(grads, lr, momentum)


def augment(patch_values, mask, rng):
    """Random flips and 90-degree rotations, applied identically to the
    mask; pure pixel permutations, no interpolation."""
    v, m = patch_values, mask
    if v.shape[-2:] != m.shape:
        raise ArgumentError(f"patch {v.shape} vs mask {m.shape}")
    if rng.random() < 0.5:
        v, m = v[..., ::-1], m[..., ::-1]
    if rng.random() < 0.5:
        v, m = v[..., ::-1, :], m[..., ::-1, :]
    rot = rng.integers(0, 4)
    if rot:
        v = np.rot90(v, rot, axes=(-2, -1))
        m = np.rot90(m, rot, axes=(-2, -1))
    return np.ascontiguousarray(v), np.ascontiguousarray(m)


def make_folds(records, k, seed):
    """Deterministic fold assignment, grouping by scene_id so every patch
    of a scene lands in the same fold."""
    if k < 2:
        raise ArgumentError(f"fold count must be >= 2, got {k}")
    if k > len(records):
        raise ArgumentError(f"k={k} exceeds {len(records)} patches")

    groups = {}
    for rec in records:
        key = rec["scene_id"] or rec["patch_id"]
        groups.setdefault(key, []).append(rec["patch_id"])

    keys = sorted(groups)
    rng = np.random.default_rng(seed)
    rng.shuffle(keys)
    folds = [[] for _ in range(k)]
    for i, key in enumerate(keys):
        folds[i % k].extend(groups[key])
    return FoldSplit(k=k, folds=tuple(tuple(f) for f in folds))


@dataclass
class LearningCurve:
    epochs: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_ji: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,lr,train_loss,val_ji\n")
            for row in zip(self.epochs, self.lrs, self.train_loss, self.val_ji):
                f.write("%d,%.9g,%.9g,%.9g\n" % row)


def _patch_mean_ji(model, items, threshold):
    jis = []
    for values, mask in items:
        prob = predict_patch(model, values)
        pred = binarize(prob, threshold)
        m = metrics_from_confusion(confusion(pred, mask))
        if m.ji is not None:
            jis.append(m.ji)
    return float(np.mean(jis)) if jis else 0.0


def train_fold(config, train_items, val_items, hyper):
    """Train one fold model from scratch.

    train_items / val_items: lists of (normalized band stack (B,H,W) f32,
    binary mask (H,W)). Returns (model, LearningCurve); fully seeded.
    """
    model = net.init_params(config, hyper.seed)
    optimizer = SgdNesterov(model)
    curve = LearningCurve()
    if hyper.epochs == 0:
        return model, curve

    rng = np.random.default_rng(hyper.seed + 1)
    n = len(train_items)
    for epoch in range(hyper.epochs):
        lr = poly_lr(epoch, hyper.epochs, hyper.lr0)
        losses = []
        for _ in range(hyper.batches_per_epoch):
            idx = rng.integers(0, n, size=hyper.batch_size)
            xs, ms = [], []
            for i in idx:
                v, m = augment(train_items[i][0], train_items[i][1], rng)
                xs.append(v)
                ms.append(m)
            batch = np.stack(xs)
            masks = np.stack(ms)
            logits = model.forward(batch)
            loss, grad = dice_ce_loss(logits, masks)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            grads = model.backward(grad)
            optimizer.step(grads, lr, hyper.momentum)
            losses.append(loss)
        curve.epochs.append(epoch)
        curve.lrs.append(lr)
        curve.train_loss.append(float(np.mean(losses)))
        curve.val_ji.append(_patch_mean_ji(model, val_items, config.threshold))
    return model, curve
