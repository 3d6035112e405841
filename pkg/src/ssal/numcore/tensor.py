"""Tensor type and the reverse-mode recording machinery.

Every differentiable op produces its output through :func:`record`, which
attaches a :class:`Node` holding the op's inputs and a closure mapping the
output gradient to input gradients. Nodes carry a global sequence number, so
creation order is a topological order of the graph; :meth:`Tape.replay` walks
the reachable nodes in strictly descending sequence order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_FLOAT_TYPES = (np.float32, np.float64)
_seq = itertools.count()
_state = threading.local()


class GraphError(RuntimeError):
    """Raised on misuse of the recorded graph (e.g. a second backward pass)."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("seq", "inputs", "backward_fn", "op", "released")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.released = False


class Tensor:
    """An n-dimensional float array with an optional gradient buffer."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if self.node is None:
            raise GraphError("tensor was not produced by a recorded operation")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        Tape.collect(self).replay(self, np.asarray(grad, dtype=self.data.dtype))

    # arithmetic sugar; the functions live in ops to keep one code path
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.scale(as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.scale(self, -1.0), other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.scale(self, 1.0 / float(other))

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, float(exponent))

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self):
        from . import ops
        return ops.total(self)

    def mean(self):
        from . import ops
        return ops.scale(ops.total(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        from . import ops
        return ops.reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out`` and, when any input needs gradients, attach its graph node.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    result = Tensor(out, dtype=out.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(op, inputs, backward_fn)
    return result


class Tape:
    """The nodes reachable from one output, ordered for a reverse sweep."""

    def __init__(self, nodes: list[Node]):
        self.nodes = sorted(nodes, key=lambda n: n.seq, reverse=True)

    @classmethod
    def collect(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            if node.released:
                raise GraphError("graph already consumed by a previous backward pass")
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        return cls(nodes)

    def replay(self, root: Tensor, grad: np.ndarray) -> None:
        # gradients of non-leaf tensors, keyed by the node that produced them
        pending: dict[int, np.ndarray] = {id(root.node): grad}
        owners: dict[int, Tensor] = {id(root.node): root}
        for node in self.nodes:
            g = pending.pop(id(node), None)
            out = owners.pop(id(node), None)
            if g is None:
                node.released = True
                node.backward_fn = None
                continue
            out.grad = g if out.grad is None else out.grad + g
            input_grads = node.backward_fn(g)
            for t, tg in zip(node.inputs, input_grads):
                if tg is None or not t.requires_grad:
                    continue
                if tg.shape != t.shape:
                    raise GraphError(f"{node.op}: gradient shape {tg.shape} != input shape {t.shape}")
                if t.node is None:
                    t.grad = tg.copy() if t.grad is None else t.grad + tg
                else:
                    key = id(t.node)
                    owners[key] = t
                    pending[key] = tg if key not in pending else pending[key] + tg
            node.released = True
            node.backward_fn = None
