"""Rank-3 tensors with a tape-based reverse-mode autodiff.

Every value flowing through the policy network is a :class:`Tensor3` of shape
``(assets, time, channels)`` holding float64 data. Operations on tensors that
are attached to a :class:`GradientTape` append a node recording the parents
and a vector-Jacobian product closure; :func:`backward` walks the tape once in
reverse and accumulates gradients into a :class:`ParamStore`.

Broadcasting is limited to a ``(1, 1, 1)`` scalar against any tensor.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (wrong root, foreign tensor, ...)."""


SCALAR = (1, 1, 1)


class Tensor3:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional["GradientTape"] = None, node: Optional[int] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionError(f"Tensor3 needs 3 dimensions, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        tag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor3(shape={self.shape}{tag})"

    def item(self) -> float:
        if self.shape != SCALAR:
            raise DimensionError(f"item() needs a scalar tensor, got {self.shape}")
        return float(self.data[0, 0, 0])

    def detach(self) -> "Tensor3":
        return Tensor3(self.data)

    # operator sugar for the loss algebra
    def __add__(self, other):
        return tensor_add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(v) -> Tensor3:
    if isinstance(v, Tensor3):
        return v
    return Tensor3(np.full(SCALAR, float(v)))


def const(data) -> Tensor3:
    return Tensor3(data)


def zeros(shape) -> Tensor3:
    return Tensor3(np.zeros(shape))


def ones_like(t: Tensor3) -> Tensor3:
    return Tensor3(np.ones(t.shape))


def zeros_like(t: Tensor3) -> Tensor3:
    return Tensor3(np.zeros(t.shape))


@dataclass
class _Node:
    op: str
    parents: tuple
    vjp: Optional[Callable]
    slot: Optional[str] = None


class GradientTape:
    """Append-only record of operations; node ``k`` only reads nodes ``< k``."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.visits: list[int] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, slot: Optional[str] = None) -> Tensor3:
        self.nodes.append(_Node("leaf", (), None, slot))
        return Tensor3(value, self, len(self.nodes) - 1)

    def _record(self, op, value, parents, vjp) -> Tensor3:
        ids = tuple(p.node if p.tape is self else None for p in parents)
        self.nodes.append(_Node(op, ids, vjp))
        return Tensor3(value, self, len(self.nodes) - 1)


def _tape_of(*ts: Tensor3) -> Optional[GradientTape]:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("operands live on different tapes")
            tape = t.tape
    return tape


def apply(op: str, value: np.ndarray, parents: Sequence[Tensor3], vjp: Callable) -> Tensor3:
    """Wrap ``value`` as the result of ``op``; record it if any parent is taped.

    ``vjp(g)`` must return one gradient (or ``None``) per parent.
    """
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor3(value)
    return tape._record(op, value, tuple(parents), vjp)


class ParamStore:
    """Named parameter slots with gradient accumulators, in insertion order."""

    def __init__(self):
        self._values: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter slot {name!r}")
        arr = np.array(value, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionError(f"slot {name!r} must be rank 3, got {arr.shape}")
        self._values[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._values[name].shape:
            raise DimensionError(f"slot {name!r}: shape {arr.shape} != {self._values[name].shape}")
        self._values[name] = arr.copy()

    def __contains__(self, name):
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def items(self):
        return self._values.items()

    def names(self) -> list[str]:
        return list(self._values)

    def size(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self._values.items():
            out.add(k, v)
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._values.values()]) if self._values else np.zeros(0)

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()]) if self.grads else np.zeros(0)

    def watch(self, tape: GradientTape) -> dict:
        """Register every slot as a leaf on ``tape``; returns name -> Tensor3."""
        return {k: tape.leaf(v, slot=k) for k, v in self._values.items()}

    def constants(self) -> dict:
        return {k: Tensor3(v) for k, v in self._values.items()}


def backward(tape: GradientTape, root: Tensor3, store: Optional[ParamStore] = None) -> dict:
    """Reverse sweep from scalar ``root``.

    Gradients of parameter leaves are added into ``store.grads`` (when given)
    and also returned as ``{slot: gradient}``.
    """
    if root.shape != SCALAR:
        raise TapeError(f"backward root must be 1x1x1, got {root.shape}")
    if root.tape is not tape or root.node is None:
        raise TapeError("root was not produced on this tape")
    n = root.node + 1
    grads: list = [None] * n
    grads[root.node] = np.ones(SCALAR)
    tape.visits = [0] * len(tape.nodes)
    out: dict = {}
    for k in range(n - 1, -1, -1):
        g = grads[k]
        node = tape.nodes[k]
        tape.visits[k] += 1
        if g is None:
            continue
        if node.op == "leaf":
            if node.slot is not None:
                out[node.slot] = out[node.slot] + g if node.slot in out else g.copy()
            continue
        pg = node.vjp(g)
        for pid, gp in zip(node.parents, pg):
            if pid is None or gp is None:
                continue
            grads[pid] = gp if grads[pid] is None else grads[pid] + gp
        grads[k] = None
    if store is not None:
        for slot, g in out.items():
            store.grads[slot] += g
    return out


def seed_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 stream for one run."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


# ---------------------------------------------------------------------------
# elementwise algebra


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def _check_pair(a: Tensor3, b: Tensor3, op: str) -> None:
    if a.shape != b.shape and a.shape != SCALAR and b.shape != SCALAR:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def tensor_add(a: Tensor3, b: Tensor3) -> Tensor3:
    _check_pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return apply("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor3, b: Tensor3) -> Tensor3:
    _check_pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return apply("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def hadamard(a: Tensor3, b: Tensor3) -> Tensor3:
    _check_pair(a, b, "hadamard")
    ad, bd = a.data, b.data
    return apply("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a: Tensor3, b: Tensor3) -> Tensor3:
    _check_pair(a, b, "div")
    ad, bd = a.data, b.data
    q = ad / bd
    return apply("div", q, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * q / bd, bd.shape)))


def scale(a: Tensor3, c: float) -> Tensor3:
    return apply("scale", a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor3, c: float) -> Tensor3:
    return apply("add_const", a.data + c, (a,), lambda g: (g,))


def log(a: Tensor3) -> Tensor3:
    ad = a.data
    return apply("log", np.log(ad), (a,), lambda g: (g / ad,))


def exp(a: Tensor3) -> Tensor3:
    e = np.exp(a.data)
    return apply("exp", e, (a,), lambda g: (g * e,))


def sqrt(a: Tensor3) -> Tensor3:
    s = np.sqrt(a.data)
    return apply("sqrt", s, (a,), lambda g: (g * 0.5 / s,))


def square(a: Tensor3) -> Tensor3:
    ad = a.data
    return apply("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a: Tensor3) -> Tensor3:
    mask = a.data > 0
    return apply("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sum_all(a: Tensor3) -> Tensor3:
    shape = a.shape
    return apply("sum_all", np.full(SCALAR, a.data.sum()), (a,),
                 lambda g: (np.full(shape, g[0, 0, 0]),))


def sum_assets(a: Tensor3) -> Tensor3:
    m = a.shape[0]
    return apply("sum_assets", a.data.sum(axis=0, keepdims=True), (a,),
                 lambda g: (np.repeat(g, m, axis=0),))


def mean_all(a: Tensor3) -> Tensor3:
    return scale(sum_all(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# structural ops


def time_slice(a: Tensor3, start: int, stop: int) -> Tensor3:
    shape = a.shape
    if not (0 <= start < stop <= shape[1]):
        raise DimensionError(f"time slice [{start}:{stop}) outside length {shape[1]}")

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop, :] = g
        return (full,)

    return apply("time_slice", a.data[:, start:stop, :], (a,), vjp)


def concat_channels(parts: Sequence[Tensor3]) -> Tensor3:
    parts = list(parts)
    m, h = parts[0].shape[:2]
    for p in parts[1:]:
        if p.shape[:2] != (m, h):
            raise DimensionError(f"concat_channels: {p.shape[:2]} != {(m, h)}")
    widths = [p.shape[2] for p in parts]
    edges = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, :, edges[k]:edges[k + 1]] for k in range(len(parts)))

    return apply("concat_channels", np.concatenate([p.data for p in parts], axis=2), parts, vjp)


def concat_time(parts: Sequence[Tensor3]) -> Tensor3:
    parts = list(parts)
    m, _, d = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2]) != (m, d):
            raise DimensionError(f"concat_time: {p.shape} incompatible with {(m, '?', d)}")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(g):
        return tuple(g[:, edges[k]:edges[k + 1], :] for k in range(len(parts)))

    return apply("concat_time", np.concatenate([p.data for p in parts], axis=1), parts, vjp)


def add_channel_bias(a: Tensor3, bias: Tensor3) -> Tensor3:
    """Per-channel bias; ``bias`` has shape (1, 1, d)."""
    if bias.shape != (1, 1, a.shape[2]):
        raise DimensionError(f"bias shape {bias.shape} does not match {a.shape[2]} channels")
    return apply("add_bias", a.data + bias.data, (a, bias),
                 lambda g: (g, g.sum(axis=(0, 1), keepdims=True)))
