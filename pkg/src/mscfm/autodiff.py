"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Only what the velocity network and the two training losses need: matmul,
elementwise arithmetic with broadcasting, tanh/gelu, reductions, concat and
slicing.  Each :class:`Tape` is single-use and single-threaded; parameter
gradients come back as a flat vector in the tape's leaf-registration order,
so two losses on the same tape can be differentiated independently.

    >>> tape = Tape()
    >>> w = tape.param("w", np.array(3.0))
    >>> float(backward(square(w))[0])
    6.0
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError", "Tensor", "Tape", "ParamLayout", "forward", "backward",
    "matmul", "add", "sub", "mul", "neg", "tanh", "gelu", "square", "sum",
    "mean", "concat", "take", "broadcast_to", "reshape",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible; carries the id of the failing op."""

    def __init__(self, op_id: int, op: str, detail: str):
        super().__init__(f"op {op_id} ({op}): {detail}")
        self.op_id = op_id
        self.op = op


class Tensor:
    __slots__ = ("value", "tape", "id", "op", "parents", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, tape, op, parents=()):
        self.value = value
        self.tape = tape
        self.op = op
        self.parents = parents  # tuple of (Tensor, vjp)
        self.id = tape._push(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, id={self.id}, shape={self.shape})"


class Tape:
    """Records nodes in creation order, which is already topological."""

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Tensor] = []
        self.leaves: list[tuple[str, Tensor]] = []
        self._next_id = 0

    def _push(self, node: Tensor) -> int:
        i = self._next_id
        self._next_id += 1
        if self.record:
            self.nodes.append(node)
        return i

    def param(self, name: str, value) -> Tensor:
        node = Tensor(np.asarray(value, dtype=np.float64), self, "param")
        self.leaves.append((name, node))
        return node

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), self, "const")


@dataclass(frozen=True)
class ParamLayout:
    """Canonical ordering of named parameter arrays inside a flat vector."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]
    offsets: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        offs, pos = [], 0
        for _, shape in self.entries:
            offs.append(pos)
            pos += int(np.prod(shape, dtype=np.int64))
        object.__setattr__(self, "offsets", tuple(offs) + (pos,))

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamLayout":
        return cls(tuple((k, tuple(np.shape(v))) for k, v in arrays.items()))

    @property
    def size(self) -> int:
        return self.offsets[-1]

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError(f"expected flat vector of length {self.size}, got shape {flat.shape}")
        return {
            name: flat[self.offsets[i]:self.offsets[i + 1]].reshape(shape)
            for i, (name, shape) in enumerate(self.entries)
        }

    def flatten(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.size)
        for i, (name, shape) in enumerate(self.entries):
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"parameter {name!r}: expected {shape}, got {a.shape}")
            out[self.offsets[i]:self.offsets[i + 1]] = a.ravel()
        return out


def forward(graph: Callable[..., Tensor], inputs: Sequence, params: np.ndarray,
            layout: ParamLayout, record: bool = True) -> Tensor:
    """Run ``graph(leaves, *inputs)`` on a fresh tape.

    ``leaves`` maps parameter names to leaf tensors built from ``params`` in
    ``layout`` order.  With ``record=False`` nothing is kept for backward.
    """
    tape = Tape(record=record)
    leaves = {name: tape.param(name, arr) for name, arr in layout.unflatten(params).items()}
    out = graph(leaves, *inputs)
    if not isinstance(out, Tensor):
        out = tape.constant(out)
    return out


def backward(root: Tensor, seed: float = 1.0) -> np.ndarray:
    """Gradient of scalar ``root`` w.r.t. every registered leaf, flattened.

    Leaves that ``root`` does not depend on receive zeros.  The tape is not
    modified, so calling this for a second root on the same tape is safe.
    """
    tape = root.tape
    if not tape.record:
        raise ValueError("tape was built with record=False")
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")

    grads: dict[int, np.ndarray] = {root.id: np.full(root.value.shape, float(seed))}
    for node in reversed(tape.nodes[:_position(tape, root) + 1]):
        g = grads.pop(node.id, None) if node.op != "param" else grads.get(node.id)
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = grads.get(parent.id)
            grads[parent.id] = contrib if prev is None else prev + contrib

    pieces = []
    for _, leaf in tape.leaves:
        g = grads.get(leaf.id)
        pieces.append(np.zeros(leaf.value.size) if g is None else np.asarray(g, dtype=np.float64).ravel())
    return np.concatenate(pieces) if pieces else np.zeros(0)


def _position(tape: Tape, node: Tensor) -> int:
    # ids equal list positions when recording from the start
    if tape.nodes[node.id] is node:
        return node.id
    return tape.nodes.index(node)


# ---------------------------------------------------------------- primitives

def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one operand must be a Tensor")


def _node(value, tape: Tape, op: str, parents) -> Tensor:
    if tape.record:
        parents = tuple((p, f) for p, f in parents if p.op != "const")
    else:
        parents = ()
    return Tensor(value, tape, op, parents)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(a.tape._next_id, op, f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape("add", a, b)
    return _node(a.value + b.value, tape, "add", (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape("sub", a, b)
    return _node(a.value - b.value, tape, "sub", (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _node(av * bv, tape, "mul", (
        (a, lambda g: _unbroadcast(g * bv, a.shape)),
        (b, lambda g: _unbroadcast(g * av, b.shape)),
    ))


def neg(a: Tensor) -> Tensor:
    return _node(-a.value, a.tape, "neg", ((a, lambda g: -g),))


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(tape._next_id, "matmul", f"{a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _node(av @ bv, tape, "matmul", (
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _node(y, a.tape, "tanh", ((a, lambda g: g * (1.0 - y * y)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.value
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + th)

    local = []  # derivative cached across repeated backward passes

    def vjp(g):
        if not local:
            dinner = _GELU_C * (1.0 + 0.134145 * x2)
            local.append(0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)
        return g * local[0]

    return _node(y, a.tape, "gelu", ((a, vjp),))


def square(a: Tensor) -> Tensor:
    x = a.value
    return _node(x * x, a.tape, "square", ((a, lambda g: 2.0 * g * x),))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    y = a.value.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _node(np.asarray(y), a.tape, "sum", ((a, vjp),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError(a.tape._next_id, "mean", "mean over an empty axis")
    s = sum(a, axis)
    return mul(s, 1.0 / n)


def concat(xs: Iterable, axis: int = -1) -> Tensor:
    xs = list(xs)
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    try:
        y = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as err:
        raise ShapeError(tape._next_id, "concat", str(err)) from None
    ax = axis % y.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])
    parents = []
    for i, x in enumerate(xs):
        sl = [slice(None)] * y.ndim
        sl[ax] = slice(bounds[i], bounds[i + 1])
        parents.append((x, lambda g, sl=tuple(sl): g[sl]))
    return _node(y, tape, "concat", parents)


def take(a: Tensor, index) -> Tensor:
    """Basic slicing (``a[index]``)."""
    try:
        y = a.value[index]
    except IndexError as err:
        raise ShapeError(a.tape._next_id, "slice", str(err)) from None
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return out

    return _node(np.array(y), a.tape, "slice", ((a, vjp),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    try:
        y = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(a.tape._next_id, "broadcast", f"{a.shape} -> {tuple(shape)}") from None
    return _node(np.array(y), a.tape, "broadcast", ((a, lambda g: _unbroadcast(g, a.shape)),))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        y = a.value.reshape(shape)
    except ValueError as err:
        raise ShapeError(a.tape._next_id, "reshape", str(err)) from None
    old = a.shape
    return _node(y, a.tape, "reshape", ((a, lambda g: g.reshape(old)),))
