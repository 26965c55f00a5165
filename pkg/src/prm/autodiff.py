"""Define-by-run reverse-mode differentiation over dense 2-D float64 arrays.

Every op takes :class:`Node` inputs and returns a new :class:`Node` whose
``parents`` hold ``(input, vjp)`` pairs, where ``vjp(upstream)`` maps the
output gradient to that input's gradient contribution.  A fresh graph is built
for every training step; nothing is reused across steps.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Node", "DimensionError", "InvalidMaskError", "ParameterError", "ContractError",
    "constant", "parameter", "matmul", "add", "sub", "mul", "scale", "relu",
    "sigmoid", "dropout", "softmax_rows", "layer_norm", "transpose",
    "concat_cols", "gather_rows", "reshape", "sum_all", "log", "list_attention",
    "backward", "op_counter",
]


class DimensionError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class _OpCounter:
    """Counts named events; used to assert one forward pass per request."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def tick(self, name: str, n: int = 1) -> None:
        self.counts[name] = self.counts.get(name, 0) + n

    def get(self, name: str) -> int:
        return self.counts.get(name, 0)

    def reset(self) -> None:
        self.counts.clear()


op_counter = _OpCounter()


class Node:
    __slots__ = ("value", "_grad", "parents", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False,
                 parents: Sequence[tuple["Node", Callable]] = (), name: str = ""):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        elif value.ndim != 2:
            raise DimensionError(f"Node holds 2-D arrays only, got shape {value.shape}")
        self.value = value
        self._grad = None
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = g

    def zero_grad(self) -> None:
        self._grad = None

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(value, name: str = "") -> Node:
    return Node(value, requires_grad=False, name=name)


def parameter(value, name: str = "") -> Node:
    return Node(value, requires_grad=True, name=name)


def _make(value: np.ndarray, parents) -> Node:
    live = [(p, fn) for p, fn in parents if p.requires_grad]
    return Node(value, requires_grad=bool(live), parents=live)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def matmul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def _broadcast_rows(a: Node, b: Node, opname: str) -> bool:
    if a.shape == b.shape:
        return False
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return True
    raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} are incompatible "
                         "(only row-vector broadcasting of the second operand is supported)")


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may be a 1×n row vector (bias) broadcast over rows."""
    a, b = _as_node(a), _as_node(b)
    bcast = _broadcast_rows(a, b, "add")
    grad_b = (lambda g: g.sum(axis=0, keepdims=True)) if bcast else (lambda g: g)
    return _make(a.value + b.value, [(a, lambda g: g), (b, grad_b)])


def sub(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    bcast = _broadcast_rows(a, b, "sub")
    grad_b = (lambda g: -g.sum(axis=0, keepdims=True)) if bcast else (lambda g: -g)
    return _make(a.value - b.value, [(a, lambda g: g), (b, grad_b)])


def mul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    bcast = _broadcast_rows(a, b, "mul")
    av, bv = a.value, b.value
    if bcast:
        grad_b = lambda g: (g * av).sum(axis=0, keepdims=True)
    else:
        grad_b = lambda g: g * av
    return _make(av * bv, [(a, lambda g: g * bv), (b, grad_b)])


def scale(a: Node, c: float) -> Node:
    return _make(a.value * c, [(a, lambda g: g * c)])


def relu(a: Node) -> Node:
    on = a.value > 0
    return _make(np.where(on, a.value, 0.0), [(a, lambda g: g * on)])


def sigmoid(a: Node) -> Node:
    # split by sign so exp never overflows
    x = a.value
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, [(a, lambda g: g * s * (1.0 - s))])


def dropout(a: Node, p: float, training: bool, key: Optional[Sequence[int]] = None) -> Node:
    """Inverted dropout.

    ``key`` seeds a dedicated stream, e.g. ``(seed, layer_id, step)``, so the
    mask depends only on the key and never on how many draws happened before.
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    rng = np.random.default_rng(None if key is None else [int(k) for k in key])
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.value * keep, [(a, lambda g: g * keep)])


def softmax_rows(a: Node, mask: Optional[np.ndarray] = None) -> Node:
    """Row-wise softmax; entries where ``mask`` is False get exactly zero weight."""
    x = a.value
    if mask is None:
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax_rows: mask shape {mask.shape} != input shape {x.shape}")
        live = mask.any(axis=1)
        if not live.all():
            raise InvalidMaskError(f"softmax_rows: row {int(np.argmin(live))} is fully masked")
        z = np.where(mask, x, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(z), 0.0)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return s * (g - (g * s).sum(axis=1, keepdims=True))

    return _make(s, [(a, vjp)])


def layer_norm(a: Node, gain: Node, bias: Node, epsilon: float = 1e-6) -> Node:
    x = a.value
    n = x.shape[1]
    if n < 1:
        raise DimensionError("layer_norm needs at least one column")
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be (1, {n})")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + epsilon)
    xhat = xc * inv
    gv = gain.value

    def grad_a(g):
        gh = g * gv
        return inv * (gh - gh.mean(axis=1, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=1, keepdims=True))

    return _make(xhat * gv + bias.value, [
        (a, grad_a),
        (gain, lambda g: (g * xhat).sum(axis=0, keepdims=True)),
        (bias, lambda g: g.sum(axis=0, keepdims=True)),
    ])


def transpose(a: Node) -> Node:
    return _make(a.value.T.copy(), [(a, lambda g: g.T)])


def concat_cols(nodes: Sequence[Node]) -> Node:
    nodes = [_as_node(n) for n in nodes]
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ: {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.shape[1] for n in nodes])
    parents = []
    for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
        parents.append((n, lambda g, lo=lo, hi=hi: g[:, lo:hi]))
    return _make(np.concatenate([n.value for n in nodes], axis=1), parents)


def gather_rows(table: Node, index) -> Node:
    """Row lookup ``table[index]``; the backward pass scatter-adds into the table."""
    index = np.asarray(index, dtype=np.int64).ravel()
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for table of {table.shape[0]} rows")

    def vjp(g):
        out = np.zeros_like(table.value)
        np.add.at(out, index, g)
        return out

    return _make(table.value[index], [(table, vjp)])


def reshape(a: Node, rows: int, cols: int) -> Node:
    if rows * cols != a.value.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as ({rows}, {cols})")
    shape = a.shape
    return _make(a.value.reshape(rows, cols), [(a, lambda g: g.reshape(shape))])


def sum_all(a: Node) -> Node:
    shape = a.shape
    return _make(np.array([[a.value.sum()]]), [(a, lambda g: np.full(shape, g[0, 0]))])


def log(a: Node, floor: float = 0.0) -> Node:
    """Natural log of ``max(a, floor)``; gradient is zero where the floor binds."""
    x = a.value
    if floor > 0.0:
        clipped = x < floor
        xs = np.where(clipped, floor, x)
        return _make(np.log(xs), [(a, lambda g: np.where(clipped, 0.0, g / xs))])
    return _make(np.log(x), [(a, lambda g: g / x)])


def list_attention(Q: Node, K: Node, V: Node, mask: np.ndarray, scale_by: Optional[float] = None):
    """Scaled dot-product self-attention inside each list of a flattened batch.

    ``Q``, ``K``, ``V`` hold ``B*L`` rows (list-major); ``mask`` is ``(B, L)``
    and marks real items.  Equivalent to :func:`softmax_rows` attention under a
    block-diagonal mask, without materializing the ``(B*L)^2`` logits.
    Returns ``(output, weights)`` with weights shaped ``(B, L, L)``.
    """
    mask = np.asarray(mask, dtype=bool)
    B, L = mask.shape
    if Q.shape[0] != B * L or K.shape != Q.shape or V.shape[0] != B * L:
        raise DimensionError(f"list_attention: Q {Q.shape}, K {K.shape}, V {V.shape} "
                             f"do not match a ({B}, {L}) batch")
    if not mask.any(axis=1).all():
        raise InvalidMaskError("list_attention: a list has no real items")
    c = 1.0 / np.sqrt(Q.shape[1]) if scale_by is None else scale_by
    q = Q.value.reshape(B, L, -1)
    k = K.value.reshape(B, L, -1)
    v = V.value.reshape(B, L, -1)
    keymask = mask[:, None, :]
    z = np.where(keymask, c * (q @ k.transpose(0, 2, 1)), -np.inf)
    z = z - z.max(axis=2, keepdims=True)
    e = np.where(keymask, np.exp(z), 0.0)
    s = e / e.sum(axis=2, keepdims=True)
    out = (s @ v).reshape(B * L, -1)
    cache = {}

    def dz(g):
        # grad_q and grad_k receive the same upstream array; compute once
        if cache.get("g") is not g:
            ds = g.reshape(B, L, -1) @ v.transpose(0, 2, 1)
            cache["g"], cache["dz"] = g, s * (ds - (ds * s).sum(axis=2, keepdims=True))
        return cache["dz"]

    def grad_q(g):
        return (c * (dz(g) @ k)).reshape(B * L, -1)

    def grad_k(g):
        return (c * (dz(g).transpose(0, 2, 1) @ q)).reshape(B * L, -1)

    def grad_v(g):
        return (s.transpose(0, 2, 1) @ g.reshape(B, L, -1)).reshape(B * L, -1)

    return _make(out, [(Q, grad_q), (K, grad_k), (V, grad_v)]), s


def _toposort(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node that requires grad.

    Calling twice without :meth:`Node.zero_grad` adds the gradients again.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
    order = _toposort(loss)
    upstream = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = upstream.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + contrib
            else:
                upstream[key] = contrib
    for node in order:
        g = upstream.get(id(node))
        if node.requires_grad and g is not None:
            node._grad = g if node._grad is None else node._grad + g
