"""Reverse-mode autodiff over a flat operation tape.

A forward pass appends one record per primitive op, in execution order.
``backward`` walks the records once in reverse, so execution order doubles
as the topological order.  Gradients are never mutated in place: each
accumulation allocates, which keeps aliasing between fan-out consumers
impossible.

Tensors are 2-D float64 throughout, except scalar reductions which are
0-d.  Constants (data, masks) are marked so no gradient work is spent on
them.  Segment ops view the stacked batch as contiguous row-blocks, one
block per bag, described by a ``Segments`` layout.
"""
import numpy as np

from .. import backend
from ..errors import ConfigError, ShapeError

EXP_LO = -20.0
EXP_HI = 20.0


class Segments:
    """Row-block layout: block s covers rows offsets[s]:offsets[s+1]."""

    __slots__ = ("offsets", "counts", "rows", "nseg")

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 1 or len(counts) == 0:
            raise ShapeError("segment counts must be a non-empty 1-D sequence")
        if (counts < 1).any():
            raise ShapeError("every segment needs at least one row")
        self.counts = counts
        self.nseg = len(counts)
        self.offsets = np.zeros(self.nseg + 1, dtype=np.int64)
        np.cumsum(counts, out=self.offsets[1:])
        self.rows = int(self.offsets[-1])


class Node:
    __slots__ = ("value", "grad", "tape", "constant")

    def __init__(self, value, tape, constant=False):
        self.value = value
        self.grad = None
        self.tape = tape
        self.constant = constant

    @property
    def shape(self):
        return self.value.shape


class Record:
    __slots__ = ("op", "out", "back")

    def __init__(self, op, out, back):
        self.op = op
        self.out = out
        self.back = back


class Tape:
    """Ordered op records plus the parameter registry for one pass."""

    def __init__(self):
        self.records: list[Record] = []
        self.params: dict[str, Node] = {}

    def leaf(self, value) -> Node:
        """A non-differentiable input (data, precomputed masks)."""
        return Node(np.ascontiguousarray(value, dtype=np.float64), self, constant=True)

    def parameter(self, name: str, value: np.ndarray) -> Node:
        if name in self.params:
            raise ConfigError(f"parameter {name!r} registered twice")
        node = Node(value, self)
        self.params[name] = node
        return node

    def push(self, op: str, out: Node, back) -> Node:
        self.records.append(Record(op, out, back))
        return out

    def op_names(self) -> list[str]:
        return [r.op for r in self.records]


def _acc(node: Node, g):
    if node.constant:
        return
    node.grad = g if node.grad is None else node.grad + g


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every registered parameter."""
    if loss.value.ndim != 0:
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
    loss.grad = np.ones((), dtype=np.float64)
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is not None:
            rec.back(g)
    grads = {}
    for name, node in tape.params.items():
        grads[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return grads


# ---------------------------------------------------------------- ops

def matmul(a: Node, b: Node) -> Node:
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.value.shape} @ {b.value.shape}")
    out = Node(a.value @ b.value, a.tape)

    def back(g):
        if not a.constant:
            _acc(a, g @ b.value.T)
        if not b.constant:
            _acc(b, a.value.T @ g)
    return a.tape.push("matmul", out, back)


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add shapes differ: {a.value.shape} vs {b.value.shape}")
    out = Node(a.value + b.value, a.tape)

    def back(g):
        _acc(a, g)
        _acc(b, g)
    return a.tape.push("add", out, back)


def add_bias(a: Node, b: Node) -> Node:
    """Add a 1-D bias across rows of a 2-D tensor."""
    if b.value.ndim != 1 or b.value.shape[0] != a.value.shape[1]:
        raise ShapeError(f"bias shape {b.value.shape} does not fit {a.value.shape}")
    out = Node(a.value + b.value, a.tape)

    def back(g):
        _acc(a, g)
        if not b.constant:
            _acc(b, g.sum(axis=0))
    return a.tape.push("add_bias", out, back)


def add_const(a: Node, c) -> Node:
    out = Node(a.value + c, a.tape)

    def back(g):
        _acc(a, g)
    return a.tape.push("add_const", out, back)


def mul(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul shapes differ: {a.value.shape} vs {b.value.shape}")
    out = Node(a.value * b.value, a.tape)

    def back(g):
        if not a.constant:
            _acc(a, g * b.value)
        if not b.constant:
            _acc(b, g * a.value)
    return a.tape.push("mul", out, back)


def mul_const(a: Node, c) -> Node:
    """Multiply by a scalar or a broadcastable constant array."""
    out = Node(np.asarray(a.value * c), a.tape)

    def back(g):
        ga = g * c
        _acc(a, ga if ga.shape == a.value.shape else _unbroadcast(ga, a.value.shape))
    return a.tape.push("mul_const", out, back)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def div(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"div shapes differ: {a.value.shape} vs {b.value.shape}")
    out = Node(a.value / b.value, a.tape)

    def back(g):
        if not a.constant:
            _acc(a, g / b.value)
        if not b.constant:
            _acc(b, -(g * out.value) / b.value)
    return a.tape.push("div", out, back)


def relu(a: Node) -> Node:
    out = Node(backend.relu_fwd(a.value), a.tape)

    def back(g):
        _acc(a, backend.relu_bwd(a.value, np.ascontiguousarray(g)))
    return a.tape.push("relu", out, back)


def sigmoid(a: Node) -> Node:
    out = Node(backend.sigmoid_fwd(a.value), a.tape)

    def back(g):
        _acc(a, backend.sigmoid_bwd(out.value, np.ascontiguousarray(g)))
    return a.tape.push("sigmoid", out, back)


def exp_clamped(a: Node, lo: float = EXP_LO, hi: float = EXP_HI) -> Node:
    """exp with the input clamped to [lo, hi]; gradient is zero where clamped."""
    out = Node(backend.exp_clamped_fwd(a.value, lo, hi), a.tape)

    def back(g):
        _acc(a, backend.exp_clamped_bwd(a.value, out.value, np.ascontiguousarray(g), lo, hi))
    return a.tape.push("exp_clamped", out, back)


def log(a: Node) -> Node:
    out = Node(np.log(a.value), a.tape)

    def back(g):
        _acc(a, g / a.value)
    return a.tape.push("log", out, back)


def clamp(a: Node, lo: float, hi: float) -> Node:
    out = Node(np.clip(a.value, lo, hi), a.tape)

    def back(g):
        _acc(a, g * ((a.value >= lo) & (a.value <= hi)))
    return a.tape.push("clamp", out, back)


def row_softmax(a: Node) -> Node:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = Node(e / e.sum(axis=1, keepdims=True), a.tape)

    def back(g):
        s = out.value
        _acc(a, s * (g - (g * s).sum(axis=1, keepdims=True)))
    return a.tape.push("row_softmax", out, back)


def segment_sum(a: Node, seg: Segments) -> Node:
    out = Node(backend.segment_sum(a.value, seg.offsets), a.tape)

    def back(g):
        _acc(a, backend.segment_expand(np.ascontiguousarray(g), seg.offsets, seg.rows))
    return a.tape.push("segment_sum", out, back)


def segment_expand(s: Node, seg: Segments) -> Node:
    out = Node(backend.segment_expand(s.value, seg.offsets, seg.rows), s.tape)

    def back(g):
        _acc(s, backend.segment_sum(np.ascontiguousarray(g), seg.offsets))
    return s.tape.push("segment_expand", out, back)


def segment_max(a: Node, seg: Segments) -> Node:
    vals, arg = backend.segment_max(a.value, seg.offsets)
    out = Node(vals, a.tape)

    def back(g):
        _acc(a, backend.scatter_rows_add(np.ascontiguousarray(g), arg, seg.rows))
    return a.tape.push("segment_max", out, back)


def segment_min(a: Node, seg: Segments) -> Node:
    vals, arg = backend.segment_min(a.value, seg.offsets)
    out = Node(vals, a.tape)

    def back(g):
        _acc(a, backend.scatter_rows_add(np.ascontiguousarray(g), arg, seg.rows))
    return a.tape.push("segment_min", out, back)


def concat_cols(nodes: list[Node]) -> Node:
    tape = nodes[0].tape
    widths = [n.value.shape[1] for n in nodes]
    out = Node(np.concatenate([n.value for n in nodes], axis=1), tape)

    def back(g):
        lo = 0
        for n, w in zip(nodes, widths):
            _acc(n, np.ascontiguousarray(g[:, lo:lo + w]))
            lo += w
    return tape.push("concat_cols", out, back)


def sum_all(a: Node) -> Node:
    out = Node(np.asarray(a.value.sum()), a.tape)

    def back(g):
        _acc(a, np.full(a.value.shape, float(g)))
    return a.tape.push("sum_all", out, back)
