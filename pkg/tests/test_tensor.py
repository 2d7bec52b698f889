import io

import numpy as np
import pytest

from vesselseg import ops
from vesselseg.rng import Rng
from vesselseg.tensor import (FormatError, GraphError, GraphNode, ShapeError, Tensor,
                              backward, grad_check, load_tensor, read_tensor_blob,
                              save_tensor, write_tensor_blob)


def rand_tensor(shape, seed=0, requires_grad=False):
    return Tensor(Rng(seed).normal_array(shape), requires_grad=requires_grad)


def test_tensors_are_strictly_4d():
    Tensor(np.zeros((1, 2, 3, 4)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3, 4)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 2, 3, 4)))


def test_item_requires_single_element():
    assert Tensor(np.full((1, 1, 1, 1), 2.5)).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 2, 2))).item()


def test_sum_backward_gives_ones():
    x = rand_tensor((2, 3, 4, 5), seed=1, requires_grad=True)
    backward(ops.tensor_sum(x))
    assert np.array_equal(x.grad, np.ones_like(x.data))


def test_fanout_accumulates_additively():
    x = rand_tensor((1, 1, 2, 2), seed=2, requires_grad=True)
    backward(ops.tensor_sum(ops.add(x, x)))
    assert np.array_equal(x.grad, 2.0 * np.ones_like(x.data))


def test_repeated_backward_doubles_and_reset_clears():
    x = rand_tensor((1, 1, 2, 2), seed=3, requires_grad=True)
    loss = ops.tensor_sum(x)
    backward(loss)
    backward(loss)
    assert np.array_equal(x.grad, 2.0 * np.ones_like(x.data))
    x.reset_grad()
    backward(loss)
    assert np.array_equal(x.grad, np.ones_like(x.data))


def test_backward_rejects_nonscalar_root():
    x = rand_tensor((1, 1, 2, 2), seed=4, requires_grad=True)
    with pytest.raises(GraphError):
        backward(ops.relu(x))


def test_backward_detects_cycles():
    x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    x.node = GraphNode("loop", (x,), lambda dy: (dy,))
    with pytest.raises(GraphError):
        backward(x)


def test_shared_subgraph_matches_pathwise_chain_rule():
    x = rand_tensor((1, 2, 3, 3), seed=5, requires_grad=True)
    y = ops.scale(x, 3.0)
    loss = ops.tensor_sum(ops.add(y, ops.scale(y, 2.0)))
    backward(loss)
    # d/dx of (3x + 2*3x) = 9
    assert np.allclose(x.grad, 9.0)


def test_grad_check_passes_on_quadratic():
    x = rand_tensor((1, 2, 3, 3), seed=6, requires_grad=True)
    assert grad_check(ops.sum_squares, x) < 1e-8


def test_grad_check_flags_corrupted_gradient():
    def broken_sum_squares(t):
        out = np.array((t.data ** 2).sum()).reshape(1, 1, 1, 1)
        node = GraphNode("broken", (t,), lambda dy: [1.7 * 2.0 * t.data * float(dy.reshape(()))])
        return Tensor(out, requires_grad=True, node=node)

    x = rand_tensor((1, 1, 3, 3), seed=7, requires_grad=True)
    assert grad_check(broken_sum_squares, x) > 1e-2


def test_grad_check_requires_grad_flag():
    x = rand_tensor((1, 1, 2, 2), seed=8, requires_grad=False)
    with pytest.raises(ValueError):
        grad_check(ops.sum_squares, x)


def test_tensor_blob_layout_is_frozen():
    arr = np.array([1.5, -2.0]).reshape(1, 1, 1, 2)
    buf = io.BytesIO()
    write_tensor_blob(buf, arr)
    raw = buf.getvalue()
    assert raw[:4] == b"VNT1"
    assert raw[4:36] == (1).to_bytes(8, "little") * 3 + (2).to_bytes(8, "little")
    assert raw[36:] == np.array([1.5, -2.0], dtype="<f8").tobytes()


def test_tensor_blob_round_trip(tmp_path):
    t = rand_tensor((2, 3, 4, 5), seed=9)
    path = tmp_path / "t.vnt"
    save_tensor(path, t)
    assert np.array_equal(load_tensor(path).data, t.data)


def test_tensor_blob_rejects_bad_magic():
    with pytest.raises(FormatError):
        read_tensor_blob(io.BytesIO(b"NOPE" + b"\x00" * 40))


def test_tensor_blob_rejects_truncation(tmp_path):
    t = rand_tensor((1, 1, 2, 2), seed=10)
    path = tmp_path / "t.vnt"
    save_tensor(path, t)
    clipped = path.read_bytes()[:-3]
    with pytest.raises(FormatError):
        read_tensor_blob(io.BytesIO(clipped))


def test_tensor_blob_rejects_trailing_bytes(tmp_path):
    t = rand_tensor((1, 1, 2, 2), seed=11)
    path = tmp_path / "t.vnt"
    save_tensor(path, t)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        load_tensor(path)
