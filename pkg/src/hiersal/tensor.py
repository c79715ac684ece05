"""Tensor container and the gradient tape.

Tensors wrap contiguous float32 (or float64, for verification runs) numpy
buffers. Operations in ``hiersal.ops`` record onto the active tape; the
backward pass walks the recorded nodes in exact reverse order, which makes
gradient accumulation deterministic by construction.
"""

import contextlib

import numpy as np

from .errors import ShapeError

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_traced")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._traced = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class TapeNode:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op, inputs, out, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations for one forward pass."""

    def __init__(self):
        self.nodes = []

    def record(self, op, inputs, out, backward_fn):
        out._traced = True
        self.nodes.append(TapeNode(op, inputs, out, backward_fn))

    def op_names(self):
        return [n.op for n in self.nodes]

    def backward(self, root, seed=None):
        """Backpropagate from ``root``, visiting nodes in reverse record order."""
        if seed is None:
            seed = np.ones_like(root.data)
        else:
            seed = np.asarray(seed, dtype=root.data.dtype)
            if seed.shape != root.data.shape:
                raise ShapeError(
                    f"backward seed shape {seed.shape} does not match root {root.data.shape}")
        root.accumulate_grad(seed)
        for node in reversed(self.nodes):
            if node.out.grad is not None:
                node.backward_fn(node.out.grad)

    def release(self):
        self.nodes = []


_active_tape = None


def active_tape():
    return _active_tape


@contextlib.contextmanager
def record_tape():
    """Context manager installing a fresh tape as the recording target."""
    global _active_tape
    prev = _active_tape
    tape = Tape()
    _active_tape = tape
    try:
        yield tape
    finally:
        _active_tape = prev


def needs_grad(inp):
    return isinstance(inp, Tensor) and (inp.requires_grad or inp._traced)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()
