"""Dense tensors with a recorded computation graph for reverse-mode gradients.

Values live in plain numpy arrays. A :class:`Graph` is activated with a
``with`` block; inside it, every op whose inputs depend on a graph leaf appends
a node holding the op kind, the input node ids and the forward values needed
by the backward rule. Ops on constants alone never create nodes, so frozen
network weights cost nothing on the backward sweep.

relu uses the subgradient 0 at the kink.
"""

from __future__ import annotations

import threading
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "ShapeError",
    "Tensor",
    "OP_KINDS",
    "active_graph",
    "apply",
    "as_tensor",
    "backward",
    "concat",
    "custom",
]


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


_local = threading.local()


def _stack() -> list["Graph"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_graph() -> "Graph | None":
    stack = _stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("kind", "inputs", "saved", "attrs", "out")

    def __init__(self, kind, inputs, saved, attrs, out):
        self.kind = kind
        self.inputs = inputs
        self.saved = saved
        self.attrs = attrs
        self.out = out


class Tensor:
    """A numpy array plus an optional handle into a computation graph."""

    __slots__ = ("data", "node_id", "graph")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data: Any, dtype: Any = np.float64):
        self.data = np.array(data, dtype=dtype)
        self.node_id: int | None = None
        self.graph: Graph | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, node_id: int | None = None, graph: "Graph | None" = None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.node_id = node_id
        t.graph = graph
        return t

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # --- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return apply("add", [self, other])

    def __radd__(self, other):
        return apply("add", [other, self])

    def __sub__(self, other):
        return apply("sub", [self, other])

    def __rsub__(self, other):
        return apply("sub", [other, self])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply("scale", [self], c=float(other))
        return apply("mul", [self, other])

    def __rmul__(self, other):
        if np.isscalar(other):
            return apply("scale", [self], c=float(other))
        return apply("mul", [other, self])

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("Tensor division is only defined by a scalar")
        return apply("scale", [self], c=1.0 / float(other))

    def __neg__(self):
        return apply("scale", [self], c=-1.0)

    def __matmul__(self, other):
        return apply("matmul", [self, other])

    def __rmatmul__(self, other):
        return apply("matmul", [other, self])

    def __getitem__(self, index):
        return apply("slice", [self], index=index)

    @property
    def T(self):
        return apply("transpose", [self], axes=None)

    def transpose(self, *axes):
        return apply("transpose", [self], axes=tuple(axes) if axes else None)

    def sum(self, axis=None):
        return apply("sum", [self], axis=axis)

    def mean(self, axis=None):
        return apply("mean", [self], axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", [self], shape=shape)

    def square(self):
        return apply("square", [self])

    def sqrt(self):
        return apply("sqrt", [self])

    def tanh(self):
        return apply("tanh", [self])

    def relu(self):
        return apply("relu", [self])

    def sin(self):
        return apply("sin", [self])

    def cos(self):
        return apply("cos", [self])


def as_tensor(x: Any) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Tensor._wrap(arr)


# ---------------------------------------------------------------------------
# op table


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _fwd_add(v, at):
    _check_broadcast("add", *v)
    return v[0] + v[1]


def _fwd_sub(v, at):
    _check_broadcast("sub", *v)
    return v[0] - v[1]


def _fwd_mul(v, at):
    _check_broadcast("mul", *v)
    return v[0] * v[1]


def _fwd_matmul(v, at):
    a, b = v
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    try:
        return np.matmul(a, b)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None


def _vjp_matmul(g, v, out, at, need=(True, True)):
    a, b = v
    if a.ndim == 1 and b.ndim == 2:
        # vector-matrix fast path (the common latent-times-weight case)
        return (b @ g if need[0] else None), (np.outer(a, g) if need[1] else None)
    if a.ndim >= 2 and b.ndim == 2:
        # batched activations times a shared weight: contract the weight gradient as one flat matmul
        ga = np.matmul(g, b.T) if need[0] else None
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if need[1] else None
        return ga, gb
    if a.ndim == 2 and b.ndim >= 3:
        keep = [i for i in range(g.ndim) if i != g.ndim - 2]  # contract batch and column axes
        ga = np.tensordot(g, b, axes=(keep, keep)) if need[0] else None
        gb = np.matmul(a.T, g) if need[1] else None
        return ga, gb
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    if a.ndim == 1 and b.ndim == 1:
        g = np.reshape(g, (1, 1))
    elif a.ndim == 1:
        g = np.expand_dims(g, -2)
    elif b.ndim == 1:
        g = np.expand_dims(g, -1)
    ga = _unbroadcast(np.matmul(g, np.swapaxes(b2, -1, -2)), a2.shape)
    gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g), b2.shape)
    return ga.reshape(a.shape), gb.reshape(b.shape)


def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def _reduced_count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[ax] for ax in axes]))


def _fwd_sqrt(v, at):
    x = v[0]
    if np.any(x < 0):
        raise ValueError(f"sqrt: negative entry {x.min()!r}")
    return np.sqrt(x)


def _fwd_concat(v, at):
    axis = at["axis"]
    try:
        return np.concatenate(v, axis=axis)
    except ValueError:
        shapes = " and ".join(str(x.shape) for x in v)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None


def _vjp_concat(g, v, out, at):
    axis = at["axis"]
    sizes = np.cumsum([x.shape[axis] for x in v])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


def _fwd_reshape(v, at):
    try:
        return np.reshape(v[0], at["shape"])
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {v[0].shape} to {at['shape']}") from None


def _vjp_slice(g, v, out, at):
    z = np.zeros_like(v[0])
    np.add.at(z, at["index"], g)
    return (z,)


def _fwd_transpose(v, at):
    axes = at["axes"]
    if axes is not None and sorted(axes) != list(range(v[0].ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {v[0].shape}")
    return np.transpose(v[0], axes)


def _vjp_transpose(g, v, out, at):
    axes = at["axes"]
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


def _fwd_custom(v, at):
    return np.asarray(at["fn"](*v))


def _vjp_custom(g, v, out, at):
    return tuple(at["vjp"](g, *v))


_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (_fwd_add, lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape))),
    "sub": (_fwd_sub, lambda g, v, o, a: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape))),
    "mul": (_fwd_mul, lambda g, v, o, a: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape))),
    "matmul": (_fwd_matmul, _vjp_matmul),
    "scale": (lambda v, a: a["c"] * v[0], lambda g, v, o, a: (a["c"] * g,)),
    "sum": (lambda v, a: np.sum(v[0], axis=a["axis"]), lambda g, v, o, a: (_expand_reduced(g, v[0].shape, a["axis"]).copy(),)),
    "mean": (
        lambda v, a: np.mean(v[0], axis=a["axis"]),
        lambda g, v, o, a: (_expand_reduced(g, v[0].shape, a["axis"]) / _reduced_count(v[0].shape, a["axis"]),),
    ),
    "square": (lambda v, a: v[0] * v[0], lambda g, v, o, a: (2.0 * v[0] * g,)),
    "sqrt": (_fwd_sqrt, lambda g, v, o, a: (0.5 * g / o,)),
    "tanh": (lambda v, a: np.tanh(v[0]), lambda g, v, o, a: (g * (1.0 - o * o),)),
    "relu": (lambda v, a: np.maximum(v[0], 0.0), lambda g, v, o, a: (g * (v[0] > 0),)),
    "sin": (lambda v, a: np.sin(v[0]), lambda g, v, o, a: (g * np.cos(v[0]),)),
    "cos": (lambda v, a: np.cos(v[0]), lambda g, v, o, a: (-g * np.sin(v[0]),)),
    "concat": (_fwd_concat, _vjp_concat),
    "reshape": (_fwd_reshape, lambda g, v, o, a: (np.reshape(g, v[0].shape),)),
    "slice": (lambda v, a: v[0][a["index"]], _vjp_slice),
    "transpose": (_fwd_transpose, _vjp_transpose),
    # user-registered forward/vjp pair; used for solver calls whose backward is an adjoint solve
    "custom": (_fwd_custom, _vjp_custom),
}

OP_KINDS = tuple(k for k in _OPS if k != "custom")


def apply(kind: str, inputs: Sequence[Any], **attrs) -> Tensor:
    """Evaluate op ``kind`` on ``inputs`` and record it on the active graph."""
    try:
        fwd = _OPS[kind][0]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    values = [t.data for t in tensors]
    out = fwd(values, attrs)
    graph = active_graph()
    if graph is not None:
        ids = tuple(t.node_id if t.graph is graph else None for t in tensors)
        if any(i is not None for i in ids):
            nid = graph._record(kind, ids, values, attrs, out)
            return Tensor._wrap(out, nid, graph)
    return Tensor._wrap(out)


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    return apply("concat", list(tensors), axis=axis)


def custom(fn: Callable, vjp: Callable, inputs: Sequence[Any]) -> Tensor:
    """Record an op with a hand-written backward rule.

    ``fn(*values) -> array`` and ``vjp(g, *values) -> tuple of input grads``.
    """
    return apply("custom", list(inputs), fn=fn, vjp=vjp)


class Graph:
    """Single-writer recording of one forward evaluation."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, kind, ids, values, attrs, out) -> int:
        self.nodes.append(Node(kind, ids, values, attrs, out))
        return len(self.nodes) - 1

    def leaf(self, value: Any, dtype: Any = None) -> Tensor:
        if isinstance(value, Tensor):
            value = value.data
        arr = np.array(value, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        nid = self._record("leaf", (), (), {}, arr)
        return Tensor._wrap(arr, nid, self)

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "leaf"]

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradient of scalar ``loss`` with respect to every leaf of this graph."""
        if not isinstance(loss, Tensor) or loss.graph is not self or loss.node_id is None:
            raise ValueError("backward: loss is not a node of this graph")
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        out: dict[int, np.ndarray] = {}
        nodes = self.nodes
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = nodes[nid]
            if node.kind == "leaf":
                out[nid] = g
                continue
            if node.kind == "matmul":
                need = (node.inputs[0] is not None, node.inputs[1] is not None)
                in_grads = _vjp_matmul(g, node.saved, node.out, node.attrs, need)
            else:
                in_grads = _OPS[node.kind][1](g, node.saved, node.out, node.attrs)
            for inp, gi in zip(node.inputs, in_grads):
                if inp is None or gi is None:
                    continue
                prev = grads.get(inp)
                grads[inp] = gi if prev is None else prev + gi
        for nid in self.leaves():
            if nid not in out:
                out[nid] = np.zeros_like(nodes[nid].out)
        return out

    def grad(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        g = self.backward(loss)
        return [g[t.node_id] for t in wrt]

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node from leaf values; returns the new value list."""
        leaf_values = leaf_values or {}
        vals: list[np.ndarray] = []
        for nid, node in enumerate(self.nodes):
            if node.kind == "leaf":
                vals.append(np.asarray(leaf_values.get(nid, node.out)))
                continue
            args = [
                vals[i] if i is not None else saved
                for i, saved in zip(node.inputs, node.saved)
            ]
            vals.append(_OPS[node.kind][0](args, node.attrs))
        return vals


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    if not isinstance(loss, Tensor) or loss.graph is None:
        raise ValueError("backward: loss was not produced on a computation graph")
    return loss.graph.backward(loss)
