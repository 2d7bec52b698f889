"""Batch, group, and instance normalization with shared scale/shift.

All three normalize to zero mean and unit (biased) variance over different
reduction sets, then apply a learnable per-channel affine:

  BN: over (batch, h, w) per channel, with running statistics for eval
  GN: over (channels/groups, h, w) per sample and group
  IN: over (h, w) per sample and channel

The input gradient for a normalizer over reduction set R is

  dx = (g - mean_R(g) - xhat * mean_R(g * xhat)) / std,  g = gamma * dy

which is shared by all three kinds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, from_op

KINDS = ("BN", "GN", "IN")


@dataclass
class NormState:
    """Learnable affine plus (for BN) running statistics.

    gamma/beta are stored (1, c, 1, 1); running statistics are plain (c,)
    arrays updated in place during training forward passes.
    """

    kind: str
    gamma: Tensor
    beta: Tensor
    momentum: float = 0.1
    eps: float = 1e-5
    groups: int = 1
    running_mean: Optional[np.ndarray] = field(default=None, repr=False)
    running_var: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown normalization kind {self.kind!r}")
        c = self.channels
        if self.gamma.shape != (1, c, 1, 1) or self.beta.shape != (1, c, 1, 1):
            raise ShapeError("gamma and beta must both be shaped (1,c,1,1)")
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in (0,1], got {self.momentum}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.kind == "GN":
            if self.groups < 1 or c % self.groups != 0:
                raise ShapeError(
                    f"channel count {c} is not divisible by {self.groups} groups")
        if self.kind == "BN":
            if self.running_mean is None:
                self.running_mean = np.zeros(c)
            if self.running_var is None:
                self.running_var = np.ones(c)
            if np.any(self.running_var < 0):
                raise ValueError("running variance entries must be nonnegative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[1]


def make_norm_state(kind: str, channels: int, groups: int = 1,
                    momentum: float = 0.1, eps: float = 1e-5) -> NormState:
    gamma = Tensor(np.ones((1, channels, 1, 1)), requires_grad=True)
    beta = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
    return NormState(kind, gamma, beta, momentum=momentum, eps=eps, groups=groups)


def _affine_and_link(op_name, x, s, xhat, inv_std, reduce_axes, stats_from_input):
    """Apply gamma/beta and wire the shared backward pass.

    inv_std broadcasts against x; when stats_from_input is False (BN eval)
    the statistics are constants and the gradient skips the recentering
    terms.
    """
    out = s.gamma.data * xhat + s.beta.data
    gamma_data = s.gamma.data

    def backward_fn(dy: np.ndarray):
        g = dy * gamma_data
        if stats_from_input:
            dx = (g
                  - g.mean(axis=reduce_axes, keepdims=True)
                  - xhat * (g * xhat).mean(axis=reduce_axes, keepdims=True)) * inv_std
        else:
            dx = g * inv_std
        dgamma = (dy * xhat).sum(axis=(0, 2, 3)).reshape(s.gamma.shape)
        dbeta = dy.sum(axis=(0, 2, 3)).reshape(s.beta.shape)
        return [dx, dgamma, dbeta]

    return from_op(out, op_name, [x, s.gamma, s.beta], backward_fn)


def batch_norm(x: Tensor, s: NormState, training: bool) -> Tensor:
    """Per-channel normalization over (batch, h, w).

    Training mode uses batch statistics and folds them into the running
    estimates as running <- (1-momentum)*running + momentum*batch; eval
    mode normalizes with the running estimates.
    """
    if s.kind != "BN":
        raise ValueError(f"batch_norm called with a {s.kind} state")
    if x.c != s.channels:
        raise ShapeError(f"input has {x.c} channels, state expects {s.channels}")
    if training:
        if x.n * x.h * x.w < 2:
            raise ShapeError(
                "batch norm in training needs more than one value per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        s.running_mean = (1.0 - s.momentum) * s.running_mean + s.momentum * mean
        s.running_var = (1.0 - s.momentum) * s.running_var + s.momentum * var
    else:
        mean = s.running_mean
        var = s.running_var
    inv_std = 1.0 / np.sqrt(var + s.eps).reshape(1, x.c, 1, 1)
    xhat = (x.data - mean.reshape(1, x.c, 1, 1)) * inv_std
    return _affine_and_link("batch_norm", x, s, xhat, inv_std, (0, 2, 3),
                            stats_from_input=training)


def group_norm(x: Tensor, s: NormState) -> Tensor:
    """Normalization over (channels/groups, h, w) per sample and group."""
    if s.kind != "GN":
        raise ValueError(f"group_norm called with a {s.kind} state")
    if x.c != s.channels:
        raise ShapeError(f"input has {x.c} channels, state expects {s.channels}")
    g = s.groups
    grouped = x.data.reshape(x.n, g, x.c // g, x.h, x.w)
    mean = grouped.mean(axis=(2, 3, 4), keepdims=True)
    var = grouped.var(axis=(2, 3, 4), keepdims=True)
    inv_std5 = 1.0 / np.sqrt(var + s.eps)
    xhat = ((grouped - mean) * inv_std5).reshape(x.shape)

    out = s.gamma.data * xhat + s.beta.data
    gamma_data = s.gamma.data
    shape5 = grouped.shape

    def backward_fn(dy: np.ndarray):
        gg = (dy * gamma_data).reshape(shape5)
        xh5 = xhat.reshape(shape5)
        dx5 = (gg
               - gg.mean(axis=(2, 3, 4), keepdims=True)
               - xh5 * (gg * xh5).mean(axis=(2, 3, 4), keepdims=True)) * inv_std5
        dgamma = (dy * xhat).sum(axis=(0, 2, 3)).reshape(s.gamma.shape)
        dbeta = dy.sum(axis=(0, 2, 3)).reshape(s.beta.shape)
        return [dx5.reshape(dy.shape), dgamma, dbeta]

    return from_op(out, "group_norm", [x, s.gamma, s.beta], backward_fn)


def instance_norm(x: Tensor, s: NormState) -> Tensor:
    """Normalization over (h, w) per sample and channel; training and eval
    behave identically."""
    if s.kind != "IN":
        raise ValueError(f"instance_norm called with a {s.kind} state")
    if x.c != s.channels:
        raise ShapeError(f"input has {x.c} channels, state expects {s.channels}")
    if x.h * x.w < 2:
        raise ShapeError("instance norm needs at least two spatial positions")
    mean = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + s.eps)
    xhat = (x.data - mean) * inv_std
    return _affine_and_link("instance_norm", x, s, xhat, inv_std, (2, 3),
                            stats_from_input=True)


def apply_norm(x: Tensor, s: NormState, training: bool) -> Tensor:
    if s.kind == "BN":
        return batch_norm(x, s, training)
    if s.kind == "GN":
        return group_norm(x, s)
    return instance_norm(x, s)
