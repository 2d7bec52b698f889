"""4-d tensors with reverse-mode automatic differentiation.

Every value in the toolkit is a dense (batch, channels, height, width)
float64 array.  Operations link their outputs to their inputs through
GraphNode records; backward() walks the resulting DAG once in reverse
topological order and accumulates gradients additively across fan-out.

Gradient arrays are never mutated in place by the engine; consumers that
rescale gradients (clipping, optimizers) must rebind rather than write
through, because a gradient may alias another tensor's buffer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """A tensor shape violates an operation's contract."""


class GraphError(RuntimeError):
    """A malformed autodiff graph: cycle, or non-scalar backward root."""


class FormatError(ValueError):
    """A serialized blob does not match the expected binary layout."""


@dataclass
class GraphNode:
    """One differentiable operation in the graph.

    backward_fn maps the gradient flowing into the op's output to a tuple
    of per-parent gradient contributions (None for parents that do not
    need one).
    """

    op: str
    parents: tuple
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, node: Optional[GraphNode] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are strictly 4-d (n,c,h,w); got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def reset_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("grad")
        if self.node is not None:
            flags.append(self.node.op)
        tag = ",".join(flags)
        return f"Tensor{self.shape}" + (f"[{tag}]" if tag else "")


def from_op(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, linking it into the graph only when needed."""
    requires = any(p.requires_grad for p in parents)
    node = GraphNode(op, tuple(parents), backward_fn) if requires else None
    return Tensor(data, requires_grad=requires, node=node)


def _reverse_topological(root: Tensor) -> list:
    """Tensors ordered so each appears before every tensor it consumes."""
    order = []
    state = {}  # id -> 1 while on the DFS path, 2 when finished
    stack = [(root, False)]
    while stack:
        t, finished = stack.pop()
        if finished:
            state[id(t)] = 2
            order.append(t)
            continue
        mark = state.get(id(t))
        if mark == 2:
            continue
        state[id(t)] = 1
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                mark = state.get(id(p))
                if mark == 1:
                    raise GraphError("cycle detected in autodiff graph")
                if mark is None:
                    stack.append((p, False))
    order.reverse()
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Gradients accumulate: calling backward twice without reset_grad()
    doubles them.
    """
    if loss.data.shape != (1, 1, 1, 1):
        raise GraphError(f"backward root must be scalar-shaped (1,1,1,1), got {loss.shape}")
    order = _reverse_topological(loss)
    flows = {id(loss): np.ones((1, 1, 1, 1))}
    for t in order:
        g = flows.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
        if t.node is None:
            continue
        contributions = t.node.backward_fn(g)
        for parent, contribution in zip(t.node.parents, contributions):
            if contribution is None or not parent.requires_grad and parent.node is None:
                continue
            key = id(parent)
            held = flows.get(key)
            flows[key] = contribution if held is None else held + contribution


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative gap between analytic and central-difference gradients.

    Relative error per element is |a - n| / max(1e-8, |a| + |n|).  `f`
    must map x to a scalar tensor and is re-run 2 * x.size times; x.data
    is perturbed in place and restored.
    """
    if not x.requires_grad:
        raise ValueError("grad_check needs x.requires_grad = True")
    x.reset_grad()
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    numeric_flat = numeric.reshape(-1)
    for i in range(flat.size):
        kept = flat[i]
        flat[i] = kept + eps
        hi = f(x).item()
        flat[i] = kept - eps
        lo = f(x).item()
        flat[i] = kept
        numeric_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


TENSOR_MAGIC = b"VNT1"


def write_tensor_blob(fh, arr: np.ndarray) -> None:
    """Magic "VNT1", four little-endian u64 shape fields, f64 payload."""
    if arr.ndim != 4:
        raise ShapeError(f"tensor blobs are 4-d; got shape {arr.shape}")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<4Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor_blob(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    header = fh.read(32)
    if len(header) != 32:
        raise FormatError("truncated tensor header")
    shape = struct.unpack("<4Q", header)
    count = 1
    for s in shape:
        count *= s
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError(f"truncated tensor payload: wanted {8 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        write_tensor_blob(fh, t.data)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        data = read_tensor_blob(fh)
        trailing = fh.read(1)
    if trailing:
        raise FormatError("trailing bytes after tensor payload")
    return Tensor(data)
