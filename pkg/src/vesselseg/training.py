"""Patch-sampling training loop: polynomial LR decay, Adam, gradient
clipping, and weight decay applied to convolution kernels only."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import ops
from .models import Network, conv_weight_tensors, save_checkpoint
from .rng import Rng
from .tensor import Tensor


@dataclass
class TrainConfig:
    patch_size: int = 64
    batch_size: int = 64
    max_steps: int = 30000
    base_lr: float = 1e-3
    poly_power: float = 0.9
    weight_decay: float = 1e-5
    clip_norm: float = 0.5
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.patch_size < 1 or self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("patch_size, batch_size, max_steps must be positive")
        if self.base_lr <= 0.0 or self.poly_power <= 0.0:
            raise ValueError("base_lr and poly_power must be positive")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be nonnegative")
        if self.clip_norm <= 0.0:
            raise ValueError("clip_norm must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0.0:
            raise ValueError("adam_eps must be positive")
        if self.log_every < 1:
            raise ValueError("log_every must be positive")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be nonnegative")


def poly_lr(step: int, cfg: TrainConfig) -> float:
    """Learning rate before optimizer step `step` (0-based)."""
    if step < 0 or step >= cfg.max_steps:
        raise ValueError(f"step {step} outside [0, {cfg.max_steps})")
    return cfg.base_lr * (1.0 - step / cfg.max_steps) ** cfg.poly_power


def sample_patch(rng: Rng, image: np.ndarray, gt: np.ndarray,
                 patch: int) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform random crop; draws the row corner, then the column corner."""
    h, w = image.shape[:2]
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} larger than image {h}x{w}")
    row = rng.randint(h - patch + 1)
    col = rng.randint(w - patch + 1)
    return (image[row:row + patch, col:col + patch],
            gt[row:row + patch, col:col + patch])


def augment(rng, image: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Random flips, quarter turns, and circular shifts up to 8 pixels.

    Draw order: horizontal-flip coin, vertical-flip coin, turn count,
    row shift, column shift.  Both arrays get the identical transform.
    """
    if rng.uniform() < 0.5:
        image = image[:, ::-1]
        gt = gt[:, ::-1]
    if rng.uniform() < 0.5:
        image = image[::-1]
        gt = gt[::-1]
    turns = rng.randint(4)
    if turns:
        image = np.rot90(image, k=turns, axes=(0, 1))
        gt = np.rot90(gt, k=turns, axes=(0, 1))
    row_shift = rng.randint(17) - 8
    col_shift = rng.randint(17) - 8
    if row_shift:
        image = np.roll(image, row_shift, axis=0)
        gt = np.roll(gt, row_shift, axis=0)
    if col_shift:
        image = np.roll(image, col_shift, axis=1)
        gt = np.roll(gt, col_shift, axis=1)
    return np.ascontiguousarray(image), np.ascontiguousarray(gt)


def normalize_input(batch: np.ndarray) -> Tensor:
    """(n,h,w,3) uint8 to a zero-centered (n,3,h,w) tensor in [-1, 1]."""
    if batch.ndim != 4 or batch.dtype != np.uint8:
        raise ValueError(f"expected 4-d uint8 batch, got {batch.dtype} {batch.shape}")
    scaled = (batch.astype(np.float64) / 255.0 - 0.5) / 0.5
    return Tensor(np.ascontiguousarray(scaled.transpose(0, 3, 1, 2)))


def training_loss(net: Network, logits: Tensor, labels: np.ndarray,
                  weight_decay: float) -> Tensor:
    """Cross entropy plus weight decay over convolution kernels."""
    total = ops.softmax_cross_entropy(logits, labels)
    if weight_decay > 0.0:
        reg = None
        for w in conv_weight_tensors(net):
            term = ops.sum_squares(w)
            reg = term if reg is None else ops.add(reg, term)
        if reg is not None:
            total = ops.add(total, ops.scale(reg, weight_decay))
    return total


def clip_grad_l2(params: Sequence[Tensor], clip_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most clip_norm.

    Gradients are rebound, never scaled in place, because a gradient
    array can be shared between tensors.  Returns the pre-clip norm.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > clip_norm and norm > 0.0:
        factor = clip_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


class Adam:
    """Adam with bias correction; state arrays follow parameter order."""

    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.adam_eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / correct1
            v_hat = v / correct2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries diagnostics."""

    def __init__(self, step: int, loss: float, param_norm: float):
        super().__init__(
            f"loss became non-finite at step {step} "
            f"(loss={loss!r}, parameter norm={param_norm!r})")
        self.step = step
        self.loss = loss
        self.param_norm = param_norm


@dataclass(frozen=True)
class LogRow:
    step: int
    lr: float
    loss: float


def write_loss_rows(path, rows: Sequence[LogRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,lr,loss\n")
        for r in rows:
            fh.write(f"{r.step},{r.lr!r},{r.loss!r}\n")


def _check_dataset(images, gts, classes: int) -> None:
    if len(images) == 0 or len(images) != len(gts):
        raise ValueError("need matching, nonempty image and ground-truth lists")
    for i, (img, gt) in enumerate(zip(images, gts)):
        if img.ndim != 3 or img.dtype != np.uint8:
            raise ValueError(f"image {i} must be (h,w,c) uint8, got {img.dtype} {img.shape}")
        if gt.shape != img.shape[:2]:
            raise ValueError(f"ground truth {i} shape {gt.shape} does not match image")
        if gt.min() < 0 or gt.max() >= classes:
            raise ValueError(f"ground truth {i} has labels outside [0, {classes})")


def train(net: Network, images: Sequence[np.ndarray], gts: Sequence[np.ndarray],
          cfg: TrainConfig, out_dir=None) -> List[LogRow]:
    """Run the full optimization; returns the logged (step, lr, loss) rows.

    Per step: draw batch_size training images uniformly with replacement,
    crop a random patch from each, augment, normalize, then one
    forward/backward pass, gradient clip, and Adam update.
    """
    cfg.validate()
    classes = net.spec.classes
    _check_dataset(images, gts, classes)
    rng = Rng(cfg.seed)
    params = net.parameters()
    adam = Adam(params, cfg)
    rows: List[LogRow] = []
    p = cfg.patch_size
    channels = net.spec.in_channels

    for step in range(1, cfg.max_steps + 1):
        batch = np.empty((cfg.batch_size, p, p, channels), dtype=np.uint8)
        labels = np.empty((cfg.batch_size, p, p), dtype=np.int64)
        for b in range(cfg.batch_size):
            idx = rng.randint(len(images))
            crop_img, crop_gt = sample_patch(rng, images[idx], gts[idx], p)
            aug_img, aug_gt = augment(rng, crop_img, crop_gt)
            batch[b] = aug_img
            labels[b] = aug_gt
        x = normalize_input(batch)
        lr = poly_lr(step - 1, cfg)
        logits = net(x, training=True)
        total = training_loss(net, logits, labels, cfg.weight_decay)
        loss_val = total.item()
        if not math.isfinite(loss_val):
            norm = math.sqrt(sum(float(np.sum(q.data * q.data)) for q in params))
            raise TrainingDiverged(step, loss_val, norm)
        for q in params:
            q.reset_grad()
        total.backward()
        clip_grad_l2(params, cfg.clip_norm)
        adam.step(lr)
        if step == 1 or step % cfg.log_every == 0 or step == cfg.max_steps:
            if not rows or rows[-1].step != step:
                rows.append(LogRow(step, lr, loss_val))
        if (out_dir is not None and cfg.checkpoint_every > 0
                and step % cfg.checkpoint_every == 0):
            save_checkpoint(f"{out_dir}/checkpoint_{step:06d}.bin", net)
    return rows
