"""Network assembly: variant layouts, reports, and checkpoint format.

Every variant is one `Network` whose stages are registered in forward
order (encoder, dilated modules, context fusion, decoder, head), so the
state-array order in a checkpoint is the same as the build order.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .layers import (ASPPModule, Conv2d, DecoderBlock, DilatedModule, Module,
                     ModuleList, NormLayer, PSPModule, ResBlock, state_slots)
from .norm import KINDS
from .rng import Rng
from .tensor import (FormatError, ShapeError, Tensor, read_tensor_blob,
                     write_tensor_blob)

VARIANTS = ("unet", "backbone", "dilated16", "dilated8", "dilated4",
            "unet_cdm", "cieunet")
CONTEXTS = ("auto", "none", "psp", "aspp")

_POOLS = {"unet": 4, "backbone": 4, "dilated16": 4, "dilated8": 3,
          "dilated4": 2, "unet_cdm": 2, "cieunet": 2}
_DECODER_LEVELS = {"unet": 4, "backbone": 0, "dilated16": 0, "dilated8": 0,
                   "dilated4": 0, "unet_cdm": 2, "cieunet": 2}
_MODULE_VARIANTS = ("dilated16", "dilated8", "dilated4", "unet_cdm", "cieunet")

CHECKPOINT_MAGIC = b"VNCK"


@dataclass
class NetworkSpec:
    """Architecture description; the checkpoint header serializes exactly
    these fields."""

    variant: str = "cieunet"
    norm_kind: str = "BN"
    context: str = "auto"
    in_channels: int = 3
    base_width: int = 32
    classes: int = 2
    multigrid: bool = True
    psp_bins: Tuple[int, ...] = (1, 2, 3, 6)
    aspp_rates: Tuple[int, ...] = (6, 12, 18)
    gn_groups: int = 8

    def resolved_context(self) -> str:
        if self.context == "auto":
            return "psp" if self.variant == "cieunet" else "none"
        return self.context

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.norm_kind not in KINDS:
            raise ValueError(f"unknown norm kind {self.norm_kind!r}")
        if self.context not in CONTEXTS:
            raise ValueError(f"unknown context {self.context!r}")
        resolved = self.resolved_context()
        if resolved != "none" and self.variant in ("unet", "backbone"):
            raise ValueError(
                f"variant {self.variant!r} does not take a context module")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if self.base_width < 4 or self.base_width % 4 != 0:
            raise ValueError("base_width must be a positive multiple of 4")
        if self.classes < 2:
            raise ValueError("classes must be at least 2")
        if self.norm_kind == "GN" and self.base_width % self.gn_groups != 0:
            raise ValueError(
                f"gn_groups={self.gn_groups} must divide base_width={self.base_width}")
        if len(self.psp_bins) == 0 or any(b < 1 for b in self.psp_bins):
            raise ValueError(f"psp_bins must be positive, got {self.psp_bins}")
        if (len(self.aspp_rates) == 0 or any(r < 1 for r in self.aspp_rates)
                or len(set(self.aspp_rates)) != len(self.aspp_rates)):
            raise ValueError(
                f"aspp_rates must be distinct positive ints, got {self.aspp_rates}")


def module_rates(index: int, multigrid: bool) -> Tuple[int, int, int]:
    """Dilation triple for the index-th cascaded module (0-based)."""
    base = 2 ** index
    if multigrid:
        return (base, 2 * base, base)
    return (2 * base, 2 * base, 2 * base)


class Network(Module):
    def __init__(self, spec: NetworkSpec, rng: Rng):
        super().__init__()
        w = spec.base_width
        kind = spec.norm_kind
        groups = spec.gn_groups
        context_kind = "BN" if kind == "IN" else kind
        pools = _POOLS[spec.variant]
        levels = pools + 1
        widths = [w * 2 ** i for i in range(levels)]
        module_count = 6 - levels if spec.variant in _MODULE_VARIANTS else 0

        blocks = []
        in_c = spec.in_channels
        for width in widths:
            blocks.append(ResBlock(rng, in_c, width, kind, groups))
            in_c = width
        self.encoder = ModuleList(blocks)

        trunk_width = widths[-1]
        if module_count:
            self.modules = ModuleList([
                DilatedModule(rng, trunk_width, trunk_width,
                              module_rates(i, spec.multigrid), kind, groups)
                for i in range(module_count)])
        else:
            self.modules = None

        resolved = spec.resolved_context()
        if resolved == "psp":
            self.context = PSPModule(rng, trunk_width, spec.psp_bins,
                                     context_kind, groups)
        elif resolved == "aspp":
            self.context = ASPPModule(rng, trunk_width, spec.aspp_rates,
                                      context_kind, groups)
        else:
            self.context = None

        decoder_levels = _DECODER_LEVELS[spec.variant]
        wiring = []
        head_width = trunk_width
        if decoder_levels:
            dec = []
            skip_widths = widths[:-1][-decoder_levels:]
            for j, skip_w in enumerate(reversed(skip_widths)):
                skip_level = len(skip_widths) - 1 - j
                dec.append(DecoderBlock(rng, head_width, skip_w, skip_w,
                                        kind, groups))
                wiring.append(
                    f"decoder{j} joins encoder{skip_level} at stride {2 ** skip_level}")
                head_width = skip_w
            self.decoder = ModuleList(dec)
        else:
            self.decoder = None
        if self.context is not None:
            wiring.append(f"{resolved} context at stride {2 ** pools}")

        self.head = Conv2d(rng, head_width, spec.classes, kernel=1)
        self.spec = spec
        self.divisor = 2 ** pools
        self.output_stride = 2 ** pools if decoder_levels == 0 else 1
        self.wiring = wiring

    def _check_input(self, x: Tensor) -> None:
        if x.c != self.spec.in_channels:
            raise ShapeError(
                f"expected {self.spec.in_channels} input channels, got {x.c}")
        if x.h % self.divisor != 0 or x.w % self.divisor != 0:
            raise ShapeError(
                f"input extents must be multiples of {self.divisor}, got {x.h}x{x.w}")

    def _trunk(self, x: Tensor, training: bool):
        skips = []
        t = x
        count = len(self.encoder)
        for i, block in enumerate(self.encoder):
            t = block(t, training)
            if i < count - 1:
                skips.append(t)
                t = ops.max_pool2d(t, 2, 2)
        if self.modules is not None:
            t = self.modules(t, training)
        if self.context is not None:
            t = self.context(t, training)
        return t, skips

    def forward_features(self, x: Tensor, training: bool = False) -> Tensor:
        """Features at the trunk's output stride, before decoder and head."""
        self._check_input(x)
        t, _ = self._trunk(x, training)
        return t

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        self._check_input(x)
        t, skips = self._trunk(x, training)
        if self.decoder is not None:
            used = skips[-len(self.decoder):]
            for block, skip in zip(self.decoder, reversed(used)):
                t = block(t, skip, training)
        t = self.head(t, training)
        if t.h != x.h or t.w != x.w:
            t = ops.upsample_bilinear(t, x.h, x.w)
        return t

    def predict_probabilities(self, x: Tensor) -> np.ndarray:
        """Eval-mode class probabilities, shape (n, classes, h, w)."""
        return ops.softmax_channel(self.forward(x, training=False)).data


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    spec.validate()
    return Network(spec, Rng(seed))


def conv_weight_tensors(net: Network) -> List[Tensor]:
    """Convolution kernels only; the set that weight decay touches."""
    return [m.weight for _, m in net.named_modules() if isinstance(m, Conv2d)]


@dataclass(frozen=True)
class LayerReport:
    conv_count: int
    norm_count: int
    param_count: int


def layer_report(net: Network) -> LayerReport:
    convs = 0
    norms = 0
    for _, m in net.named_modules():
        if isinstance(m, Conv2d):
            convs += 1
        elif isinstance(m, NormLayer):
            norms += 1
    params = sum(t.data.size for _, t in net.named_parameters())
    return LayerReport(convs, norms, params)


_SPEC_FIELDS = ("variant", "norm_kind", "context", "in_channels", "base_width",
                "classes", "multigrid", "psp_bins", "aspp_rates", "gn_groups")
_INT_FIELDS = ("in_channels", "base_width", "classes", "gn_groups")
_TUPLE_FIELDS = ("psp_bins", "aspp_rates")


def spec_to_text(spec: NetworkSpec) -> str:
    lines = []
    for name in _SPEC_FIELDS:
        value = getattr(spec, name)
        if name == "multigrid":
            text = "true" if value else "false"
        elif name in _TUPLE_FIELDS:
            text = ",".join(str(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{name}={text}")
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> NetworkSpec:
    values = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"malformed header line {line!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _SPEC_FIELDS:
            raise FormatError(f"unknown header key {key!r}")
        if key in values:
            raise FormatError(f"duplicate header key {key!r}")
        values[key] = val
    missing = [k for k in _SPEC_FIELDS if k not in values]
    if missing:
        raise FormatError(f"header missing keys {missing}")
    kwargs = {}
    for key, val in values.items():
        try:
            if key == "multigrid":
                if val not in ("true", "false"):
                    raise ValueError(val)
                kwargs[key] = val == "true"
            elif key in _TUPLE_FIELDS:
                kwargs[key] = tuple(int(v) for v in val.split(","))
            elif key in _INT_FIELDS:
                kwargs[key] = int(val)
            else:
                kwargs[key] = val
        except ValueError as exc:
            raise FormatError(f"bad header value {key}={val!r}") from exc
    return NetworkSpec(**kwargs)


def save_checkpoint(path, net: Network) -> None:
    header = spec_to_text(net.spec).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for slot in state_slots(net):
            write_tensor_blob(fh, slot.get())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    if len(data) < 12:
        raise FormatError("truncated checkpoint header")
    header_len = struct.unpack_from("<Q", data, 4)[0]
    if len(data) < 12 + header_len:
        raise FormatError("truncated checkpoint header")
    try:
        header = data[12:12 + header_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("checkpoint header is not valid text") from exc
    spec = spec_from_text(header)
    try:
        spec.validate()
    except ValueError as exc:
        raise FormatError(f"checkpoint header invalid: {exc}") from exc
    net = build_network(spec, seed=0)
    buf = io.BytesIO(data[12 + header_len:])
    for slot in state_slots(net):
        arr = read_tensor_blob(buf)
        slot.set(arr)
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint state")
    return net
