"""Small tape-based reverse-mode differentiation over dense float64 arrays.

Every value is a :class:`Node` holding a numpy array. Operations record their
parents and a closure that pushes the output gradient back to them. Calling
:func:`backward` on a scalar node walks the tape in reverse topological order.

Only the operations the forecasting model and its losses need are provided.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class Node:
    """A value on the tape together with its accumulated gradient."""

    __slots__ = ("value", "_grad", "parents", "op", "requires_grad", "_backward")

    def __init__(self, value, parents: Sequence["Node"] = (), backward=None,
                 op: str = "leaf", requires_grad: bool | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.parents = tuple(parents)
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def grad(self) -> np.ndarray:
        # buffers are allocated on first use; an untouched grad reads as zeros
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = np.asarray(g, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def variable(value) -> Node:
    """Leaf whose gradient is wanted."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Node:
    return Node(value, requires_grad=False, op="const")


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out axes numpy broadcasting added or stretched
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _accumulate(node: Node, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node._grad is None:
        node._grad = np.array(np.broadcast_to(g, node.value.shape), dtype=np.float64)
    else:
        node._grad += g


def segment_sum(values: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """out[j] = sum of values[k] over k with idx[k] == j."""
    out = np.zeros((n,) + values.shape[1:])
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    out[sorted_idx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def _check_broadcast(a: Node, b: Node, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise

def add(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "add")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return Node(a.value + b.value, (a, b), bw, "add")


def sub(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return Node(a.value - b.value, (a, b), bw, "sub")


def mul(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "mul")

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return Node(a.value * b.value, (a, b), bw, "mul")


def scale(a: Node, k: float) -> Node:
    return Node(a.value * k, (a,), lambda g: _accumulate(a, g * k), "scale")


def add_n(nodes: Sequence[Node]) -> Node:
    """Sum of equally shaped nodes, recorded as a single tape entry."""
    nodes = list(nodes)
    if not nodes:
        raise ContractError("add_n needs at least one operand")
    for n in nodes[1:]:
        if n.shape != nodes[0].shape:
            raise DimensionError(f"add_n: shapes {nodes[0].shape} and {n.shape} differ")
    out = nodes[0].value.copy()
    for n in nodes[1:]:
        out += n.value

    def bw(g):
        for n in nodes:
            _accumulate(n, g)

    return Node(out, nodes, bw, "add_n")


def relu(a: Node) -> Node:
    mask = a.value > 0  # subgradient 0 at the kink
    return Node(np.where(mask, a.value, 0.0), (a,), lambda g: _accumulate(a, g * mask), "relu")


def sigmoid(a: Node) -> Node:
    x = a.value
    # branch on sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Node(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)), "sigmoid")


def log(a: Node) -> Node:
    return Node(np.log(a.value), (a,), lambda g: _accumulate(a, g / a.value), "log")


def absolute(a: Node) -> Node:
    sign = np.sign(a.value)
    return Node(np.abs(a.value), (a,), lambda g: _accumulate(a, g * sign), "abs")


def clip(a: Node, lo: float, hi: float) -> Node:
    inside = (a.value >= lo) & (a.value <= hi)
    return Node(np.clip(a.value, lo, hi), (a,), lambda g: _accumulate(a, g * inside), "clip")


def power(a: Node, p: float) -> Node:
    out = a.value ** p
    return Node(out, (a,), lambda g: _accumulate(a, g * p * a.value ** (p - 1.0)), "power")


# structural

def reshape(a: Node, shape: Sequence[int]) -> Node:
    out = a.value.reshape(shape)
    return Node(out, (a,), lambda g: _accumulate(a, g.reshape(a.shape)), "reshape")


def sum_over_axis(a: Node, axis: int | tuple[int, ...] | None = None) -> Node:
    out = a.value.sum(axis=axis)

    def bw(g):
        if axis is not None:
            axes = (axis,) if isinstance(axis, int) else axis
            g = np.expand_dims(g, tuple(ax % a.value.ndim for ax in axes))
        _accumulate(a, np.broadcast_to(g, a.shape))

    return Node(out, (a,), bw, "sum")


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = list(nodes)
    ref = nodes[0].shape
    ax = axis % len(ref)
    for n in nodes[1:]:
        other = n.shape
        if len(other) != len(ref) or any(
                x != y for i, (x, y) in enumerate(zip(ref, other)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {other} disagree off axis {axis}")
    out = np.concatenate([n.value for n in nodes], axis=ax)
    bounds = np.cumsum([n.shape[ax] for n in nodes])[:-1]

    def bw(g):
        for n, piece in zip(nodes, np.split(g, bounds, axis=ax)):
            _accumulate(n, piece)

    return Node(out, nodes, bw, "concat")


def concat_lastdim(a: Node, b: Node) -> Node:
    return concat([a, b], axis=-1)


def slice_axis(a: Node, start: int, stop: int, axis: int = 0) -> Node:
    index = [slice(None)] * a.value.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        if a.requires_grad:
            a.grad[index] += g

    return Node(a.value[index], (a,), bw, "slice")


def take_rows(a: Node, idx: np.ndarray) -> Node:
    """Gather along axis 0 (rows may repeat)."""
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        _accumulate(a, segment_sum(g, idx, a.shape[0]))

    return Node(a.value[idx], (a,), bw, "take_rows")


def scatter_rows(a: Node, idx: np.ndarray, n: int, weights: np.ndarray | None = None) -> Node:
    """Sum rows of ``a`` into ``n`` output rows; row k goes to ``idx[k]``,
    optionally scaled by ``weights[k]``."""
    idx = np.asarray(idx, dtype=np.intp)
    if weights is None:
        w = None
        vals = a.value
    else:
        w = np.asarray(weights, dtype=np.float64).reshape((-1,) + (1,) * (a.value.ndim - 1))
        vals = a.value * w

    def bw(g):
        gk = g[idx]
        _accumulate(a, gk if w is None else gk * w)

    return Node(segment_sum(vals, idx, n), (a,), bw, "scatter_rows")


def transpose(a: Node, axes: Sequence[int]) -> Node:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Node(a.value.transpose(axes), (a,),
                lambda g: _accumulate(a, g.transpose(inverse)), "transpose")


# products

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def bw(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return Node(a.value @ b.value, (a, b), bw, "matmul")


def bmm(a: Node, b: Node, transpose_b: bool = False) -> Node:
    """Batched matrix product over the last two axes (batch axes must match)."""
    bv = b.value.swapaxes(-1, -2) if transpose_b else b.value
    if a.value.ndim < 2 or a.value.ndim != bv.ndim or a.shape[:-2] != bv.shape[:-2] \
            or a.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"bmm: shapes {a.shape} and {b.shape} are incompatible")

    def bw(g):
        _accumulate(a, np.matmul(g, bv.swapaxes(-1, -2)))
        if b.requires_grad:
            gb = np.matmul(a.value.swapaxes(-1, -2), g)
            _accumulate(b, gb.swapaxes(-1, -2) if transpose_b else gb)

    return Node(np.matmul(a.value, bv), (a, b), bw, "bmm")


def einsum(spec: str, *operands: Node) -> Node:
    """General contraction with explicit output, e.g. ``'rtcd,hkd->rtchk'``.

    Indices may not repeat inside one operand.
    """
    lhs, out_sub = spec.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ContractError(f"einsum: {len(in_subs)} subscripts for {len(operands)} operands")
    sizes: dict[str, int] = {}
    for sub_, op in zip(in_subs, operands):
        if len(sub_) != op.value.ndim or len(set(sub_)) != len(sub_):
            raise DimensionError(f"einsum: subscript {sub_!r} does not fit shape {op.shape}")
        for ch, n in zip(sub_, op.shape):
            if sizes.setdefault(ch, n) != n:
                raise DimensionError(f"einsum: index {ch!r} has extents {sizes[ch]} and {n}")
    values = [op.value for op in operands]
    out = np.einsum(spec, *values, optimize=True)

    def bw(g):
        for k, op in enumerate(operands):
            if not op.requires_grad:
                continue
            target = in_subs[k]
            present = set(out_sub).union(*(in_subs[j] for j in range(len(in_subs)) if j != k))
            kept = "".join(ch for ch in target if ch in present)
            terms = [out_sub] + [in_subs[j] for j in range(len(in_subs)) if j != k]
            arrays = [g] + [values[j] for j in range(len(values)) if j != k]
            gk = np.einsum(",".join(terms) + "->" + kept, *arrays, optimize=True)
            if kept != target:
                # index only in this operand: gradient constant along it
                gk = np.expand_dims(gk, tuple(i for i, ch in enumerate(target) if ch not in present))
                gk = np.broadcast_to(gk, op.shape)
            _accumulate(op, gk)

    return Node(out, operands, bw, "einsum")


def softmax_lastdim(a: Node) -> Node:
    if a.value.ndim == 0 or a.shape[-1] < 1:
        raise ContractError("softmax needs a non-empty last dimension")
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return Node(out, (a,), bw, "softmax")


# driving the tape

def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Fill ``grad`` of every node reachable from scalar ``root``."""
    if root.value.size != 1 or root.value.ndim > 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    root.grad = np.ones_like(root.value)
    for node in reversed(_topological(root)):
        if node._backward is not None:
            node._backward(node.grad)


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-6

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.max_rel_error.values())

    @property
    def failing(self) -> list[str]:
        return [k for k, err in self.max_rel_error.items() if err > self.tol]

    def __str__(self) -> str:
        lines = [f"{name}: {err:.3e}" for name, err in self.max_rel_error.items()]
        return ("PASS" if self.passed else "FAIL") + f" (tol {self.tol:g})\n" + "\n".join(lines)


def grad_check(f: Callable[[Mapping[str, Node]], Node], params: Mapping[str, np.ndarray],
               step: float = 1e-5, tol: float = 1e-6, floor: float = 1e-6,
               names: Iterable[str] | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps entries whose true gradient is ~0 from dominating.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: variable(v) for k, v in base.items()}
    backward(f(leaves))

    def evaluate(values):
        return float(f({k: constant(v) for k, v in values.items()}).value)

    report = GradCheckReport(tol=tol)
    for name in (names if names is not None else base):
        analytic = leaves[name].grad
        worst = 0.0
        flat = base[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate(base)
            flat[i] = orig - step
            down = evaluate(base)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report.max_rel_error[name] = worst
    return report
