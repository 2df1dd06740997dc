"""Losses, optimizer, schedules, augmentation, patch sampling and the
training loop.

The objective is a weighted sum of per-stage masked cross-entropies with
fixed weights (0.3, 0.4, 1.0). Learning rate and weight decay both hold
their starting value for a warm phase and then follow cosine annealing to
their end value, reaching it exactly at the final epoch.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .autograd import Tensor, from_op
from .data import Volume, brain_mask, normalize
from .network import CascadeNet, cascade_forward

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Every knob of a training run. Defaults are the desk-scale profile;
    `paper_profile` restores the full-scale schedule lengths."""
    epochs: int = 20
    warm_epochs: int = 6
    lr_start: float = 1e-4
    lr_end: float = 5e-5
    wd_start: float = 1e-3
    wd_end: float = 1e-6
    dropout_p: float = 0.25
    batch_size: int = 8
    patch_extent: int = 24
    steps_per_epoch: int = 25
    loss_weights: tuple = (0.3, 0.4, 1.0)
    intensity_shift: float = 0.1
    intensity_scale: tuple = (0.9, 1.1)
    rotations: tuple = (0, 90, 180, 270)
    cutout_max_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        if not 0 < self.wd_end <= self.wd_start:
            raise ValueError("need 0 < wd_end <= wd_start")
        if not 0 <= self.warm_epochs < self.epochs:
            raise ValueError("need warm_epochs < epochs")
        if any(w <= 0 for w in self.loss_weights):
            raise ValueError("loss weights must be positive")
        if not 0 <= self.cutout_max_fraction < 1:
            raise ValueError("cutout fraction must lie in [0, 1)")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.intensity_scale = tuple(float(s) for s in self.intensity_scale)
        self.rotations = tuple(int(r) for r in self.rotations)

    @classmethod
    def paper_profile(cls, **overrides):
        base = dict(epochs=170, warm_epochs=50, patch_extent=120)
        base.update(overrides)
        return cls(**base)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kinds = {f.name: f for f in fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in kinds:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            default = getattr(cls, key, None)
            f = kinds[key]
            if f.type in ("int", int):
                kwargs[key] = int(value)
            elif f.type in ("float", float):
                kwargs[key] = float(value)
            elif f.type in ("tuple", tuple):
                kwargs[key] = tuple(float(x) for x in value.split(","))
            else:
                kwargs[key] = value
        return cls(**kwargs)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(cfg.to_text())


def load_config(path) -> TrainConfig:
    return TrainConfig.from_text(Path(path).read_text())


PROB_FLOOR = 1e-7


def cross_entropy_masked(probs: Tensor, labels: np.ndarray,
                         mask: np.ndarray) -> Tensor:
    """Mean over masked voxels of -log(probability of the true class).

    Probabilities are clamped to [1e-7, 1]; the one-hot target is implicit
    in the label indexing. An empty mask yields a zero loss and a warning.
    """
    n, k, h, w = probs.shape
    labels = np.asarray(labels)
    mask = np.asarray(mask)
    if labels.shape != (n, h, w) or mask.shape != (n, h, w):
        raise ValueError("labels and mask must be (N, H, W)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    mask_f = mask.astype(probs.dtype)
    count = mask_f.sum()
    if count == 0:
        logger.warning("cross_entropy_masked: empty mask, returning 0")
        return from_op(np.zeros((), dtype=probs.data.dtype), "ce_empty",
                       (probs,), lambda g: (np.zeros_like(probs.data),))
    clamped = np.clip(probs.data, PROB_FLOOR, 1.0)
    lab = labels.astype(np.int64)
    picked = np.take_along_axis(clamped, lab[:, None], axis=1)[:, 0]
    loss = -(np.log(picked) * mask_f).sum() / count
    pass_through = (probs.data >= PROB_FLOOR) & (probs.data <= 1.0)

    def back(g):
        dpicked = -(mask_f / (picked * count)) * g
        dprobs = np.zeros_like(probs.data)
        np.put_along_axis(dprobs, lab[:, None], dpicked[:, None], axis=1)
        return (dprobs * pass_through,)

    return from_op(np.asarray(loss, dtype=probs.data.dtype), "cross_entropy",
                   (probs,), back)


def cascade_loss(stage_probs, labels, mask, weights=(0.3, 0.4, 1.0)):
    """Weighted sum of the per-stage losses; returns (total, parts)."""
    if len(stage_probs) != 3:
        raise ValueError(f"expected 3 stages, got {len(stage_probs)}")
    parts = [cross_entropy_masked(p, labels, mask) for p in stage_probs]
    total = parts[0] * weights[0] + parts[1] * weights[1] + parts[2] * weights[2]
    return total, parts


def schedule_value(epoch: int, start: float, end: float, warm_epochs: int,
                   total_epochs: int) -> float:
    """Hold `start` for the warm phase, then cosine-anneal so that the
    final epoch lands exactly on `end`."""
    if warm_epochs >= total_epochs:
        raise ValueError("warm_epochs must be < total_epochs")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if epoch < warm_epochs:
        return start
    span = total_epochs - 1 - warm_epochs
    if span == 0:
        return end
    t = (epoch - warm_epochs) / span
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam with bias correction plus decoupled weight decay applied
    directly to the parameter (not scaled by the learning rate)."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float, wd: float) -> None:
        if lr < 0 or wd < 0:
            raise ValueError("lr and wd must be >= 0")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ValueError("gradient/parameter shape mismatch")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * update - wd * p.data

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adamw_step(optimizer: AdamW, lr: float, wd: float) -> None:
    optimizer.step(lr, wd)


@dataclass
class PatchSample:
    patch: np.ndarray   # (C, H, W)
    labels: np.ndarray  # (H, W)
    mask: np.ndarray    # (H, W) brain voxels
    contains_tumor: bool = True


def sample_patch(vol: Volume, extent: int,
                 rng: np.random.Generator) -> PatchSample:
    """Draw an axial patch that contains at least one tumor voxel, with
    offsets clamped so the patch stays inside the slice. Falls back to a
    uniform draw (flagged) when the volume has no tumor."""
    c, d, h, w = vol.channels.shape
    if extent > h or extent > w:
        raise ValueError(f"patch extent {extent} exceeds in-plane {h}x{w}")
    tumor = np.argwhere(vol.labels > 0)
    if tumor.size:
        zd, zh, zw = tumor[rng.integers(len(tumor))]
        h0 = int(rng.integers(max(0, zh - extent + 1), min(zh, h - extent) + 1))
        w0 = int(rng.integers(max(0, zw - extent + 1), min(zw, w - extent) + 1))
        contains = True
    else:
        logger.warning("volume %r has no tumor; uniform patch sampling",
                       vol.subject_id)
        zd = int(rng.integers(d))
        h0 = int(rng.integers(h - extent + 1))
        w0 = int(rng.integers(w - extent + 1))
        contains = False
    patch = vol.channels[:, zd, h0:h0 + extent, w0:w0 + extent].copy()
    labels = vol.labels[zd, h0:h0 + extent, w0:w0 + extent].copy()
    mask = brain_mask(patch[:, None]).reshape(extent, extent)
    return PatchSample(patch, labels, mask, contains)


def augment_patch(patch: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                  rng: np.random.Generator, mask: np.ndarray = None):
    """Per-channel intensity scale/shift, one shared right-angle rotation,
    then a square cutout zeroed in the image channels only.

    Labels (and the mask, when given) are moved by the rotation and by
    nothing else.
    """
    patch = patch.copy()
    labels = labels.copy()
    mask = None if mask is None else mask.copy()
    c, h, w = patch.shape
    lo, hi = cfg.intensity_scale
    for ch in range(c):
        s = rng.uniform(lo, hi)
        t = rng.uniform(-cfg.intensity_shift, cfg.intensity_shift)
        patch[ch] = patch[ch] * s + t
    rot = cfg.rotations[rng.integers(len(cfg.rotations))]
    if rot % 90 != 0:
        raise ValueError("rotations must be multiples of 90 degrees")
    k = (rot // 90) % 4
    if k:
        patch = np.ascontiguousarray(np.rot90(patch, k, axes=(1, 2)))
        labels = np.ascontiguousarray(np.rot90(labels, k))
        if mask is not None:
            mask = np.ascontiguousarray(np.rot90(mask, k))
    max_side = int(cfg.cutout_max_fraction * min(h, w))
    if max_side > 0:
        side = int(rng.integers(0, max_side + 1))
        if side > 0:
            y0 = int(rng.integers(0, h - side + 1))
            x0 = int(rng.integers(0, w - side + 1))
            patch[:, y0:y0 + side, x0:x0 + side] = 0
    if mask is None:
        return patch, labels
    return patch, labels, mask


@dataclass
class EpochStats:
    epoch: int
    loss: float
    loss_stage1: float
    loss_stage2: float
    loss_stage3: float
    lr: float
    wd: float


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "L", "L1", "L2", "L3", "lr", "wd"])
        for row in history:
            writer.writerow([row.epoch, row.loss, row.loss_stage1,
                             row.loss_stage2, row.loss_stage3, row.lr, row.wd])


def _make_batch(volumes, cfg: TrainConfig, sample_rng, augment_rng, dtype):
    patches, labels, masks = [], [], []
    for _ in range(cfg.batch_size):
        vol = volumes[sample_rng.integers(len(volumes))]
        sample = sample_patch(vol, cfg.patch_extent, sample_rng)
        p, l, m = augment_patch(sample.patch, sample.labels, cfg,
                                augment_rng, sample.mask)
        patches.append(p)
        labels.append(l)
        masks.append(m)
    x = np.stack(patches).astype(dtype)
    return Tensor(x), np.stack(labels), np.stack(masks)


def train(dataset, net: CascadeNet, cfg: TrainConfig):
    """Run the full loop: sample, augment, forward, weighted loss,
    backward, optimizer step, with per-epoch scheduled lr and wd.

    Deterministic for a fixed config seed. Returns (net, history); aborts
    with RuntimeError if the loss goes non-finite.
    """
    if not dataset:
        raise ValueError("empty dataset")
    volumes = [normalize(v) for v in dataset]
    ss = np.random.SeedSequence(cfg.seed)
    sample_seed, augment_seed, dropout_seed = ss.spawn(3)
    sample_rng = np.random.default_rng(sample_seed)
    augment_rng = np.random.default_rng(augment_seed)
    dropout_rng = np.random.default_rng(dropout_seed)
    optimizer = AdamW(net.parameters())
    history = []
    for epoch in range(cfg.epochs):
        lr = schedule_value(epoch, cfg.lr_start, cfg.lr_end,
                            cfg.warm_epochs, cfg.epochs)
        wd = schedule_value(epoch, cfg.wd_start, cfg.wd_end,
                            cfg.warm_epochs, cfg.epochs)
        sums = np.zeros(4)
        for _ in range(cfg.steps_per_epoch):
            x, labels, masks = _make_batch(volumes, cfg, sample_rng,
                                           augment_rng, net.dtype)
            outputs = cascade_forward(x, net, training=True, rng=dropout_rng)
            probs = [p for _, p in outputs]
            total, parts = cascade_loss(probs, labels, masks,
                                        cfg.loss_weights)
            values = [total.item()] + [p.item() for p in parts]
            if not all(math.isfinite(v) for v in values):
                raise RuntimeError(f"diverged at epoch {epoch}: loss={values}")
            net.zero_grad()
            total.backward()
            optimizer.step(lr, wd)
            sums += values
        avg = sums / cfg.steps_per_epoch
        history.append(EpochStats(epoch, avg[0], avg[1], avg[2], avg[3],
                                  lr, wd))
        logger.info("epoch %d: L=%.4f L1=%.4f L2=%.4f L3=%.4f lr=%.2e wd=%.2e",
                    epoch, avg[0], avg[1], avg[2], avg[3], lr, wd)
    return net, history
