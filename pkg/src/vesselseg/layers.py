"""Parameterized building blocks composed into segmentation networks.

Module tracks parameters and submodules in registration (attribute
assignment) order, which fixes the serialization order of every state
array and keeps checkpoints deterministic.  Blocks never reassign a
registered attribute after construction.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .norm import NormState, apply_norm, make_norm_state
from .ops import ConvParams
from .rng import Rng
from .tensor import FormatError, ShapeError, Tensor


class Module:
    """Base class for layers with registered parameters and children."""

    def __init__(self):
        object.__setattr__(self, "_entries", [])

    def __setattr__(self, name, value):
        entries = self.__dict__.get("_entries")
        if entries is not None:
            if isinstance(value, Module):
                entries.append(("child", name))
            elif isinstance(value, Tensor) and value.requires_grad:
                entries.append(("param", name))
        object.__setattr__(self, name, value)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix or ".", self
        for kind, name in self._entries:
            if kind == "child":
                child = getattr(self, name)
                yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        out = []
        for kind, name in self._entries:
            path = f"{prefix}.{name}" if prefix else name
            if kind == "param":
                out.append((path, getattr(self, name)))
            else:
                out.extend(getattr(self, name).named_parameters(path))
        return out

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]


class StateSlot:
    """One serializable 4-d array within a network, in a fixed order."""

    __slots__ = ("name", "get", "set")

    def __init__(self, name: str, get: Callable[[], np.ndarray],
                 set_: Callable[[np.ndarray], None]):
        self.name = name
        self.get = get
        self.set = set_


def _param_slot(name: str, t: Tensor) -> StateSlot:
    def setter(arr: np.ndarray):
        if arr.shape != t.data.shape:
            raise FormatError(
                f"state entry {name}: shape {arr.shape} does not match {t.data.shape}")
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
    return StateSlot(name, lambda: t.data, setter)


def _running_slot(name: str, state: NormState, field: str) -> StateSlot:
    def getter() -> np.ndarray:
        vec = getattr(state, field)
        return vec.reshape(1, vec.size, 1, 1)

    def setter(arr: np.ndarray):
        c = state.channels
        if arr.shape != (1, c, 1, 1):
            raise FormatError(
                f"state entry {name}: shape {arr.shape} does not match (1,{c},1,1)")
        setattr(state, field, arr.reshape(c).copy())

    return StateSlot(name, getter, setter)


def state_slots(module: Module) -> List[StateSlot]:
    """Every parameter plus BN running statistics, in registration order."""
    slots: List[StateSlot] = []

    def visit(m: Module, prefix: str):
        for kind, name in m._entries:
            path = f"{prefix}.{name}" if prefix else name
            if kind == "param":
                slots.append(_param_slot(path, getattr(m, name)))
            else:
                visit(getattr(m, name), path)
        if isinstance(m, NormLayer) and m.state.kind == "BN":
            slots.append(_running_slot(f"{prefix}.running_mean", m.state, "running_mean"))
            slots.append(_running_slot(f"{prefix}.running_var", m.state, "running_var"))

    visit(module, "")
    return slots


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._count = 0
        for m in modules:
            setattr(self, f"item{self._count}", m)
            self._count += 1

    def __len__(self) -> int:
        return self._count

    def __iter__(self):
        return (getattr(self, f"item{i}") for i in range(self._count))

    def __getitem__(self, i: int) -> Module:
        return getattr(self, f"item{i}")

    def forward(self, x: Tensor, training: bool) -> Tensor:
        for m in self:
            x = m(x, training)
        return x


class Conv2d(Module):
    """Convolution layer; weights start He-normal, biases at zero.

    Default padding keeps the spatial extent at stride 1, including for
    dilated kernels.
    """

    def __init__(self, rng: Rng, in_c: int, out_c: int, kernel: int = 3,
                 stride: int = 1, dilation: int = 1, padding: Optional[int] = None,
                 bias: bool = True):
        super().__init__()
        if padding is None:
            padding = ((kernel - 1) * dilation) // 2
        fan_in = in_c * kernel * kernel
        self.weight = Tensor(
            rng.normal_array((out_c, in_c, kernel, kernel), scale=math.sqrt(2.0 / fan_in)),
            requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_c, 1, 1)), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return ops.conv2d(x, ConvParams(self.weight, self.bias, self.stride,
                                        self.padding, self.dilation))


class NormLayer(Module):
    """Normalization layer wrapping a NormState; `in_context` marks layers
    living inside a context-fusion module."""

    def __init__(self, kind: str, channels: int, groups: int = 1,
                 in_context: bool = False):
        super().__init__()
        self.state = make_norm_state(kind, channels, groups=groups if kind == "GN" else 1)
        self.gamma = self.state.gamma
        self.beta = self.state.beta
        self.in_context = in_context

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return apply_norm(x, self.state, training)


class ConvBlock(Module):
    """conv -> norm -> relu."""

    def __init__(self, rng: Rng, in_c: int, out_c: int, norm_kind: str, groups: int,
                 kernel: int = 3, dilation: int = 1, in_context: bool = False):
        super().__init__()
        self.conv = Conv2d(rng, in_c, out_c, kernel=kernel, dilation=dilation)
        self.norm = NormLayer(norm_kind, out_c, groups=groups, in_context=in_context)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return ops.relu(self.norm(self.conv(x, training), training))


class ResBlock(Module):
    """Two 3x3 conv+norm at one dilation rate plus an additive shortcut;
    the shortcut projects through a 1x1 conv+norm only on width change."""

    def __init__(self, rng: Rng, in_c: int, out_c: int, norm_kind: str, groups: int,
                 dilation: int = 1):
        super().__init__()
        self.conv1 = Conv2d(rng, in_c, out_c, dilation=dilation)
        self.norm1 = NormLayer(norm_kind, out_c, groups=groups)
        self.conv2 = Conv2d(rng, out_c, out_c, dilation=dilation)
        self.norm2 = NormLayer(norm_kind, out_c, groups=groups)
        if in_c != out_c:
            self.proj_conv = Conv2d(rng, in_c, out_c, kernel=1)
            self.proj_norm = NormLayer(norm_kind, out_c, groups=groups)
        else:
            self.proj_conv = None
            self.proj_norm = None
        self.dilation = dilation

    def forward(self, x: Tensor, training: bool) -> Tensor:
        h = ops.relu(self.norm1(self.conv1(x, training), training))
        h = self.norm2(self.conv2(h, training), training)
        shortcut = x
        if self.proj_conv is not None:
            shortcut = self.proj_norm(self.proj_conv(x, training), training)
        return ops.relu(ops.add(h, shortcut))


class DoubleConv(Module):
    def __init__(self, rng: Rng, in_c: int, out_c: int, norm_kind: str, groups: int):
        super().__init__()
        self.block1 = ConvBlock(rng, in_c, out_c, norm_kind, groups)
        self.block2 = ConvBlock(rng, out_c, out_c, norm_kind, groups)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return self.block2(self.block1(x, training), training)


class DecoderBlock(Module):
    """Upsample x2 to the skip's resolution, concatenate, double conv."""

    def __init__(self, rng: Rng, in_c: int, skip_c: int, out_c: int,
                 norm_kind: str, groups: int):
        super().__init__()
        self.fuse = DoubleConv(rng, in_c + skip_c, out_c, norm_kind, groups)

    def forward(self, x: Tensor, skip: Tensor, training: bool) -> Tensor:
        up = ops.upsample_bilinear(x, skip.h, skip.w)
        return self.fuse(ops.concat_channels([up, skip]), training)


class DilatedModule(Module):
    """Three residual dilated blocks sharing one channel width."""

    def __init__(self, rng: Rng, in_c: int, channels: int, rates: Tuple[int, int, int],
                 norm_kind: str, groups: int):
        super().__init__()
        if len(rates) != 3:
            raise ValueError(f"a dilated module takes exactly three rates, got {rates}")
        blocks = []
        width = in_c
        for r in rates:
            blocks.append(ResBlock(rng, width, channels, norm_kind, groups, dilation=r))
            width = channels
        self.blocks = ModuleList(blocks)
        self.rates = tuple(rates)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return self.blocks(x, training)


class PSPModule(Module):
    """Pyramid pooling: parallel adaptive average pools projected to a
    quarter width each, upsampled, concatenated with the input, and fused
    back to the input width by a 3x3 conv."""

    def __init__(self, rng: Rng, channels: int, bins: Tuple[int, ...],
                 norm_kind: str, groups: int):
        super().__init__()
        if channels % 4 != 0:
            raise ShapeError(f"pyramid pooling needs a width divisible by 4, got {channels}")
        if len(bins) == 0 or any(b < 1 for b in bins):
            raise ValueError(f"bins must be positive, got {bins}")
        width = channels // 4
        self.branches = ModuleList([
            ConvBlock(rng, channels, width, norm_kind, groups, kernel=1, in_context=True)
            for _ in bins])
        self.fuse = ConvBlock(rng, channels + width * len(bins), channels,
                              norm_kind, groups, kernel=3, in_context=True)
        self.bins = tuple(bins)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        top = max(self.bins)
        if x.h < top or x.w < top:
            raise ShapeError(
                f"pyramid pooling needs input of at least {top}x{top}, got {x.h}x{x.w}")
        feats = [x]
        for size, branch in zip(self.bins, self.branches):
            pooled = ops.adaptive_avg_pool2d(x, size, size)
            pooled = branch(pooled, training)
            feats.append(ops.upsample_bilinear(pooled, x.h, x.w))
        return self.fuse(ops.concat_channels(feats), training)


class ASPPModule(Module):
    """Parallel context branches: a 1x1 conv, one dilated 3x3 conv per
    rate, and a global-pool branch, fused by a 1x1 projection."""

    def __init__(self, rng: Rng, channels: int, rates: Tuple[int, ...],
                 norm_kind: str, groups: int):
        super().__init__()
        if len(rates) == 0 or len(set(rates)) != len(rates):
            raise ValueError(f"rates must be nonempty and distinct, got {rates}")
        if channels % 4 != 0:
            raise ShapeError(f"context fusion needs a width divisible by 4, got {channels}")
        width = channels // 4
        self.point = ConvBlock(rng, channels, width, norm_kind, groups,
                               kernel=1, in_context=True)
        self.dilated = ModuleList([
            ConvBlock(rng, channels, width, norm_kind, groups, kernel=3, dilation=r,
                      in_context=True)
            for r in rates])
        self.image_pool = ConvBlock(rng, channels, width, norm_kind, groups,
                                    kernel=1, in_context=True)
        self.project = ConvBlock(rng, width * (len(rates) + 2), channels,
                                 norm_kind, groups, kernel=1, in_context=True)
        self.rates = tuple(rates)

    @property
    def branch_count(self) -> int:
        return len(self.rates) + 2

    def forward(self, x: Tensor, training: bool) -> Tensor:
        feats = [self.point(x, training)]
        for branch in self.dilated:
            feats.append(branch(x, training))
        pooled = ops.adaptive_avg_pool2d(x, 1, 1)
        pooled = self.image_pool(pooled, training)
        feats.append(ops.upsample_bilinear(pooled, x.h, x.w))
        return self.project(ops.concat_channels(feats), training)
