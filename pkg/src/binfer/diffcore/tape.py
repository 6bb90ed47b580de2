"""Tape-based reverse-mode differentiation over float64 numpy arrays."""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class _Node(NamedTuple):
    op: str
    parents: tuple  # node ids, None for constant inputs
    vjp: Callable | None  # out-adjoint -> tuple of parent adjoints


class Tape:
    """Append-only record of operations for one evaluation.

    Node ids are assigned in creation order, so inputs always precede
    their consumers and a single reverse sweep is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> "Tensor":
        value = np.array(value, dtype=np.float64)
        return self._append(_Node("leaf", (), None), value)

    def record(self, op: str, value: np.ndarray, parents: tuple, vjp: Callable) -> "Tensor":
        self.nodes.append(_Node(op, parents, vjp))
        self.values.append(value)
        return Tensor(value, self, len(self.nodes) - 1)

    def _append(self, node, value):
        self.nodes.append(node)
        self.values.append(value)
        return Tensor(value, self, len(self.nodes) - 1)


class Tensor:
    """A float64 array living on a tape."""

    __slots__ = ("data", "tape", "id")
    __array_priority__ = 100.0

    def __init__(self, data: np.ndarray, tape: Tape, node_id: int):
        self.data = data
        self.tape = tape
        self.id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"

    # operator sugar; implementations live in ops
    def __add__(self, o):
        return _ops().add(self, o)

    def __radd__(self, o):
        return _ops().add(o, self)

    def __sub__(self, o):
        return _ops().sub(self, o)

    def __rsub__(self, o):
        return _ops().sub(o, self)

    def __mul__(self, o):
        return _ops().mul(self, o)

    def __rmul__(self, o):
        return _ops().mul(o, self)

    def __truediv__(self, o):
        return _ops().div(self, o)

    def __rtruediv__(self, o):
        return _ops().div(o, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, o):
        return _ops().matmul(self, o)

    def __rmatmul__(self, o):
        return _ops().matmul(o, self)

    def __pow__(self, p):
        return _ops().power(self, p)

    def __getitem__(self, idx):
        return _ops().getitem(self, idx)

    @property
    def T(self):
        return _ops().transpose(self)

    def sum(self, axis=None):
        return _ops().sum(self, axis)

    def mean(self, axis=None):
        return _ops().mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)


def _ops():
    from . import ops

    return ops


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar node; returns adjoints for every leaf.

    Leaves the loss does not depend on get a zero adjoint.
    """
    if loss.tape is not tape:
        raise ValueError("loss tensor belongs to a different tape")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = tape.nodes
    adj: list = [None] * len(nodes)
    adj[loss.id] = np.ones_like(loss.data)
    for i in range(loss.id, -1, -1):
        g = adj[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for pid, pg in zip(node.parents, parent_grads):
            if pid is None or pg is None:
                continue
            assert pid < i, "tape is not topologically ordered"
            adj[pid] = pg if adj[pid] is None else adj[pid] + pg
    out = {}
    for i, node in enumerate(nodes):
        if node.op == "leaf":
            out[i] = np.array(adj[i]) if adj[i] is not None else np.zeros_like(tape.values[i])
    return out


def value_and_grad(fn: Callable, *args, argnums: int | Sequence[int] = 0):
    """Evaluate ``fn(*args)`` on a fresh tape; return (value, grad(s)).

    Arguments selected by ``argnums`` become leaves; the rest pass through
    unchanged. With a single int ``argnums`` a single gradient is returned.
    """
    single = isinstance(argnums, int)
    which = (argnums,) if single else tuple(argnums)
    tape = Tape()
    call_args = list(args)
    leaves = {}
    for k in which:
        leaves[k] = tape.leaf(args[k])
        call_args[k] = leaves[k]
    out = fn(*call_args)
    if not isinstance(out, Tensor):
        # output independent of the leaves
        value = float(np.asarray(out))
        grads = [np.zeros_like(np.asarray(args[k], dtype=np.float64)) for k in which]
    else:
        value = float(out.data)
        adj = backward(tape, out)
        grads = [adj[leaves[k].id] for k in which]
    return (value, grads[0]) if single else (value, tuple(grads))


def grad(fn: Callable, argnums: int | Sequence[int] = 0) -> Callable:
    def wrapped(*args):
        return value_and_grad(fn, *args, argnums=argnums)[1]

    return wrapped
