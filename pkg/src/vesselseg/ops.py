"""Differentiable operations over 4-d tensors.

Convolution is lowered to one matrix product against an im2col buffer so
both the forward pass and both weight/input gradients run inside BLAS.
The input gradient is itself a convolution: the output gradient is
zero-stuffed by the stride and correlated with the 180-degree-rotated
kernel.  Bilinear upsampling is expressed as two small interpolation
matrices applied per axis, which makes its backward pass exact and
BLAS-bound as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, from_op


def _pad_hw(a: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    if pad_h == 0 and pad_w == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))


def _window_view(a: np.ndarray, kh: int, kw: int, stride: int, dilation: int) -> np.ndarray:
    """View of shape (n, c, kh, kw, out_h, out_w); no data copied."""
    n, c, h, w = a.shape
    out_h = (h - ((kh - 1) * dilation + 1)) // stride + 1
    out_w = (w - ((kw - 1) * dilation + 1)) // stride + 1
    sn, sc, sh, sw = a.strides
    shape = (n, c, kh, kw, out_h, out_w)
    strides = (sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride)
    return as_strided(a, shape=shape, strides=strides)


def _correlate(a: np.ndarray, kernel: np.ndarray, stride: int, pad_h: int, pad_w: int,
               dilation: int):
    """Cross-correlate a (n,c,h,w) with kernel (oc,c,kh,kw).

    Returns (output, col_matrix) where col_matrix is the materialized
    im2col buffer of shape (c*kh*kw, n*out_h*out_w), reusable for the
    weight gradient.
    """
    oc, c, kh, kw = kernel.shape
    padded = _pad_hw(a, pad_h, pad_w)
    cols = _window_view(padded, kh, kw, stride, dilation)
    n, _, _, _, out_h, out_w = cols.shape
    col_matrix = cols.transpose(1, 2, 3, 0, 4, 5).reshape(c * kh * kw, n * out_h * out_w)
    out = kernel.reshape(oc, c * kh * kw) @ col_matrix
    out = np.ascontiguousarray(out.reshape(oc, n, out_h, out_w).transpose(1, 0, 2, 3))
    return out, col_matrix


@dataclass
class ConvParams:
    """Kernel bank plus geometry for conv2d.

    weight is (out_c, in_c, kh, kw); bias, when present, is stored as a
    (1, out_c, 1, 1) tensor so it serializes like any other tensor.
    """

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        oc, _, kh, kw = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.dilation < 1:
            raise ShapeError(f"dilation must be >= 1, got {self.dilation}")
        if self.bias is not None and self.bias.shape != (1, oc, 1, 1):
            raise ShapeError(
                f"bias must have shape (1,{oc},1,1), got {self.bias.shape}")


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Dilated 2-d convolution (cross-correlation); zero padding.

    out[n,o,i,j] = bias[o] + sum_{c,u,v} x[n,c, i*s-pad+u*r, j*s-pad+v*r]
                   * w[o,c,u,v], with out-of-bounds taps reading zero.
    """
    w = p.weight
    oc, ic, kh, kw = w.shape
    if x.c != ic:
        raise ShapeError(f"conv2d channel mismatch: input has {x.c} channels, kernel expects {ic}")
    eff_h = (kh - 1) * p.dilation + 1
    eff_w = (kw - 1) * p.dilation + 1
    if eff_h > x.h + 2 * p.padding or eff_w > x.w + 2 * p.padding:
        raise ShapeError(
            f"effective kernel {eff_h}x{eff_w} exceeds padded input "
            f"{x.h + 2 * p.padding}x{x.w + 2 * p.padding}")

    out, col_matrix = _correlate(x.data, w.data, p.stride, p.padding, p.padding, p.dilation)
    if p.bias is not None:
        out = out + p.bias.data

    parents = [x, w] + ([p.bias] if p.bias is not None else [])
    stride, pad, dilation = p.stride, p.padding, p.dilation
    in_shape = x.shape
    need_dx = x.requires_grad or x.node is not None
    need_dw = w.requires_grad
    has_bias = p.bias is not None
    w_data = w.data
    keep_cols = col_matrix if need_dw else None

    def backward_fn(dy: np.ndarray):
        dx = dw = db = None
        if need_dw:
            dy_mat = dy.transpose(1, 0, 2, 3).reshape(oc, -1)
            dw = (dy_mat @ keep_cols.T).reshape(oc, ic, kh, kw)
        if has_bias:
            db = dy.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1)
        if need_dx:
            n, _, out_h, out_w = dy.shape
            stuffed = np.zeros((n, oc, (out_h - 1) * stride + 1, (out_w - 1) * stride + 1))
            stuffed[:, :, ::stride, ::stride] = dy
            rotated = np.ascontiguousarray(w_data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            full, _ = _correlate(stuffed, rotated, 1,
                                 (kh - 1) * dilation, (kw - 1) * dilation, dilation)
            dx = np.zeros(in_shape)
            span_h = max(0, min(in_shape[2], full.shape[2] - pad))
            span_w = max(0, min(in_shape[3], full.shape[3] - pad))
            dx[:, :, :span_h, :span_w] = full[:, :, pad:pad + span_h, pad:pad + span_w]
        grads = [dx, dw]
        if has_bias:
            grads.append(db)
        return grads

    return from_op(out, "conv2d", parents, backward_fn)


def max_pool2d(x: Tensor, k: int, s: int) -> Tensor:
    """k-by-k max pooling at stride s; ties route gradient to the first
    window position in row-major order."""
    if k < 1 or s < 1:
        raise ShapeError(f"pool kernel and stride must be >= 1, got k={k}, s={s}")
    if k > x.h or k > x.w:
        raise ShapeError(f"pool kernel {k} exceeds input extent {x.h}x{x.w}")
    windows = _window_view(x.data, k, k, s, 1)
    n, c, _, _, out_h, out_w = windows.shape
    flat = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n, c, out_h, out_w, k * k)
    arg = flat.argmax(axis=4)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]

    in_shape = x.shape

    def backward_fn(dy: np.ndarray):
        rows = (arg // k) + np.arange(out_h).reshape(1, 1, out_h, 1) * s
        cols = (arg % k) + np.arange(out_w).reshape(1, 1, 1, out_w) * s
        ni = np.arange(n).reshape(n, 1, 1, 1)
        ci = np.arange(c).reshape(1, c, 1, 1)
        dx = np.zeros(in_shape)
        np.add.at(dx, (ni, ci, rows, cols), dy)
        return [dx]

    return from_op(out, "max_pool2d", [x], backward_fn)


def _bin_edges(extent: int, bins: int):
    starts = [(i * extent) // bins for i in range(bins)]
    ends = [((i + 1) * extent) // bins for i in range(bins)]
    return starts, ends


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Mean over bins [i*h/out_h, (i+1)*h/out_h) per axis; out=(1,1) is the
    global average."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    if out_h > x.h or out_w > x.w:
        raise ShapeError(
            f"adaptive pool cannot upsample: {x.h}x{x.w} -> {out_h}x{out_w}")
    hs, he = _bin_edges(x.h, out_h)
    ws, we = _bin_edges(x.w, out_w)
    out = np.empty((x.n, x.c, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            out[:, :, i, j] = x.data[:, :, hs[i]:he[i], ws[j]:we[j]].mean(axis=(2, 3))

    in_shape = x.shape

    def backward_fn(dy: np.ndarray):
        dx = np.zeros(in_shape)
        for i in range(out_h):
            for j in range(out_w):
                area = (he[i] - hs[i]) * (we[j] - ws[j])
                dx[:, :, hs[i]:he[i], ws[j]:we[j]] += dy[:, :, i:i + 1, j:j + 1] / area
        return [dx]

    return from_op(out, "adaptive_avg_pool2d", [x], backward_fn)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row o holds the two source weights for output position o
    (half-pixel centers, clamped at the borders)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), float(n_in - 1))
        i0 = int(np.floor(src))
        frac = src - i0
        i1 = min(i0 + 1, n_in - 1)
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear upsampling with half-pixel centers; factor 1 is the
    identity, downscaling is rejected."""
    if out_h < x.h or out_w < x.w:
        raise ShapeError(
            f"upsample_bilinear cannot downscale: {x.h}x{x.w} -> {out_h}x{out_w}")
    if out_h == x.h and out_w == x.w:
        def backward_identity(dy: np.ndarray):
            return [dy]
        return from_op(x.data.copy(), "upsample_bilinear", [x], backward_identity)

    rows = _interp_matrix(x.h, out_h)
    cols_t = _interp_matrix(x.w, out_w).T
    out = rows @ (x.data @ cols_t)

    def backward_fn(dy: np.ndarray):
        return [rows.T @ dy @ cols_t.T]

    return from_op(out, "upsample_bilinear", [x], backward_fn)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, preserving list order."""
    if len(xs) == 0:
        raise ShapeError("concat_channels needs at least one tensor")
    first = xs[0]
    for t in xs[1:]:
        if (t.n, t.h, t.w) != (first.n, first.h, first.w):
            raise ShapeError(
                f"concat_channels mismatch: {t.shape} does not align with {first.shape}")
    out = np.concatenate([t.data for t in xs], axis=1)
    splits = np.cumsum([t.c for t in xs])[:-1]

    def backward_fn(dy: np.ndarray):
        return np.split(dy, splits, axis=1)

    return from_op(out, "concat_channels", list(xs), backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    x_data = x.data

    def backward_fn(dy: np.ndarray):
        return [dy * (x_data > 0)]

    return from_op(out, "relu", [x], backward_fn)


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over the channel axis, per pixel."""
    if x.c < 2:
        raise ShapeError(f"softmax needs at least 2 channels, got {x.c}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward_fn(dy: np.ndarray):
        inner = (dy * out).sum(axis=1, keepdims=True)
        return [out * (dy - inner)]

    return from_op(out, "softmax_channel", [x], backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward_fn(dy: np.ndarray):
        return [dy, dy]

    return from_op(a.data + b.data, "add", [a, b], backward_fn)


def scale(x: Tensor, alpha: float) -> Tensor:
    def backward_fn(dy: np.ndarray):
        return [alpha * dy]

    return from_op(alpha * x.data, "scale", [x], backward_fn)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a (1,1,1,1) tensor."""
    out = np.array(x.data.sum()).reshape(1, 1, 1, 1)
    in_shape = x.shape

    def backward_fn(dy: np.ndarray):
        return [np.full(in_shape, dy.reshape(()))]

    return from_op(out, "tensor_sum", [x], backward_fn)


def sum_squares(x: Tensor) -> Tensor:
    """Sum of squared elements, as a (1,1,1,1) tensor."""
    out = np.array((x.data * x.data).sum()).reshape(1, 1, 1, 1)
    x_data = x.data

    def backward_fn(dy: np.ndarray):
        return [(2.0 * float(dy.reshape(()))) * x_data]

    return from_op(out, "sum_squares", [x], backward_fn)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Fixed linear functional sum(x * weights), as a (1,1,1,1) tensor."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != x.shape:
        raise ShapeError(f"weights shape {weights.shape} must match input {x.shape}")
    out = np.array((x.data * weights).sum()).reshape(1, 1, 1, 1)

    def backward_fn(dy: np.ndarray):
        return [float(dy.reshape(())) * weights]

    return from_op(out, "weighted_sum", [x], backward_fn)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy between channel softmax and integer
    labels of shape (n, h, w)."""
    if logits.c < 2:
        raise ShapeError(f"cross-entropy needs at least 2 channels, got {logits.c}")
    labels = np.asarray(labels)
    if labels.shape != (logits.n, logits.h, logits.w):
        raise ShapeError(
            f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= logits.c:
        raise ValueError(
            f"labels must lie in [0, {logits.c}), got range "
            f"[{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    picked = np.take_along_axis(z, labels[:, None, :, :], axis=1)
    pixel_count = logits.n * logits.h * logits.w
    out = np.array((logsumexp - picked).sum() / pixel_count).reshape(1, 1, 1, 1)

    def backward_fn(dy: np.ndarray):
        grad = np.exp(z - logsumexp)
        np.put_along_axis(grad, labels[:, None, :, :],
                          np.take_along_axis(grad, labels[:, None, :, :], axis=1) - 1.0, axis=1)
        return [grad * (float(dy.reshape(())) / pixel_count)]

    return from_op(out, "softmax_cross_entropy", [logits], backward_fn)
