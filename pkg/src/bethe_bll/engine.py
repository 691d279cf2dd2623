"""Dense-matrix reverse-mode differentiation.

Every value on a tape is a 2-D float64 numpy array.  A :class:`Tape` records
each forward op as a :class:`Node`; :meth:`Tape.backward` walks the record in
reverse and accumulates adjoints into the parameter leaves.

Forward rules live in ``FORWARD`` and adjoint rules in ``ADJOINTS``, both keyed
by op kind, so a rule can be inspected (or deliberately broken in a mutation
test) without touching the tape machinery.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy import linalg as sla
from scipy import special

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class EngineError(Exception):
    pass


class ShapeError(EngineError, ValueError):
    pass


class DomainError(EngineError, ValueError):
    pass


class NonFiniteError(EngineError, FloatingPointError):
    pass


class ContractError(EngineError):
    pass


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(-1, 1)
    if a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


class Node:
    __slots__ = ("tape", "id", "kind", "inputs", "value", "attrs")

    def __init__(self, tape, id, kind, inputs, value, attrs):
        self.tape = tape
        self.id = id
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.attrs = attrs

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() on non-scalar node of shape {self.shape}")
        return float(self.value[0, 0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(id={self.id}, kind={self.kind!r}, shape={self.shape})"


class Tape:
    """Ordered op record.  Node ids are positions in ``nodes``."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: set[int] = set()

    def _push(self, kind, inputs, value, attrs=None) -> Node:
        node = Node(self, len(self.nodes), kind, tuple(inputs), value, attrs or {})
        self.nodes.append(node)
        return node

    def param(self, value) -> Node:
        node = self._push("leaf", (), as_matrix(value).copy())
        self.parameters.add(node.id)
        return node

    def const(self, value) -> Node:
        return self._push("const", (), as_matrix(value))

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ContractError("node belongs to a different tape")
            return x
        return self.const(x)

    def apply(self, kind: str, *inputs, **attrs) -> Node:
        """Run forward rule ``kind`` on ``inputs`` and record it."""
        nodes = [self.lift(x) for x in inputs]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            value = FORWARD[kind]([n.value for n in nodes], attrs)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{kind} produced non-finite output")
        return self._push(kind, [n.id for n in nodes], value, attrs)

    def backward(self, root: Node) -> dict[int, np.ndarray]:
        """Adjoints of scalar ``root`` w.r.t. every parameter leaf, keyed by id."""
        if root.tape is not self:
            raise ContractError("root belongs to a different tape")
        if root.value.shape != (1, 1):
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        adj: dict[int, np.ndarray] = {root.id: np.ones((1, 1))}
        grads: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes[: root.id + 1]):
            g = adj.pop(node.id, None)
            if g is None:
                continue
            if node.id in self.parameters:
                grads[node.id] = g
            if not node.inputs:
                continue
            ins = [self.nodes[i].value for i in node.inputs]
            for i, gi in zip(node.inputs, ADJOINTS[node.kind](g, ins, node.value, node.attrs)):
                adj[i] = adj[i] + gi if i in adj else gi
        return {i: grads.get(i, np.zeros_like(self.nodes[i].value)) for i in sorted(self.parameters)}


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ContractError("at least one operand must be a tape node")


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# forward rules: f(values, attrs) -> value


def _f_matmul(v, at):
    a, b = v
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def _f_add(v, at):
    _same_shape("add", *v)
    return v[0] + v[1]


def _f_sub(v, at):
    _same_shape("sub", *v)
    return v[0] - v[1]


def _f_hadamard(v, at):
    _same_shape("hadamard", *v)
    return v[0] * v[1]


def _f_log(v, at):
    (a,) = v
    if np.any(a <= 0):
        raise DomainError("log of non-positive entry")
    return np.log(a)


def _f_sum(v, at):
    axis = at.get("axis")
    if axis is None:
        return np.array([[v[0].sum()]])
    return v[0].sum(axis=axis, keepdims=True)


def _f_broadcast_row(v, at):
    (a,) = v
    if a.shape[0] != 1:
        raise ShapeError(f"broadcast_row needs a 1-row input, got {a.shape}")
    return np.repeat(a, at["n"], axis=0)


def _f_logdet_spd(v, at):
    (a,) = v
    _square("logdet_spd", a)
    c = sla.cho_factor(a, lower=True)
    return np.array([[2.0 * np.log(np.diag(c[0])).sum()]])


def _f_inv_quad(v, at):
    a, m = v
    _square("inv_quad", a)
    if m.shape != (a.shape[0], 1):
        raise ShapeError(f"inv_quad: vector shape {m.shape} vs matrix {a.shape}")
    c = sla.cho_factor(a, lower=True)
    return m.T @ sla.cho_solve(c, m)


def _square(kind, a):
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"{kind}: matrix must be square, got {a.shape}")


def _f_log_ndtr_diff(v, at):
    a, b = v
    _same_shape("log_ndtr_diff", a, b)
    return log_ndtr_diff(a, b, at.get("upper_open"), at.get("lower_open"), at.get("floor", 0.0))


FORWARD: dict[str, Callable] = {
    "matmul": _f_matmul,
    "add": _f_add,
    "sub": _f_sub,
    "hadamard": _f_hadamard,
    "scale": lambda v, at: at["k"] * v[0],
    "tanh": lambda v, at: np.tanh(v[0]),
    "exp": lambda v, at: np.exp(v[0]),
    "log": _f_log,
    "square": lambda v, at: v[0] * v[0],
    "sum": _f_sum,
    "broadcast_row": _f_broadcast_row,
    "transpose": lambda v, at: v[0].T.copy(),
    "log_ndtr": lambda v, at: special.log_ndtr(v[0]),
    "softplus": lambda v, at: np.logaddexp(0.0, v[0]),
    "logdet_spd": _f_logdet_spd,
    "inv_quad": _f_inv_quad,
    "log_ndtr_diff": _f_log_ndtr_diff,
}


# ---------------------------------------------------------------------------
# adjoint rules: f(upstream, input values, output value, attrs) -> input grads


def _a_sum(g, ins, out, at):
    return [np.broadcast_to(g, ins[0].shape).copy()]


def _a_logdet_spd(g, ins, out, at):
    (a,) = ins
    c = sla.cho_factor(a, lower=True)
    inv = sla.cho_solve(c, np.eye(a.shape[0]))
    return [g[0, 0] * inv]


def _a_inv_quad(g, ins, out, at):
    a, m = ins
    c = sla.cho_factor(a, lower=True)
    s = sla.cho_solve(c, m)
    return [-g[0, 0] * (s @ s.T), 2.0 * g[0, 0] * s]


def _a_log_ndtr_diff(g, ins, out, at):
    a, b = ins
    upper_open = at.get("upper_open")
    lower_open = at.get("lower_open")
    # unfloored log-probability so the floor does not zero the gradient
    logp = log_ndtr_diff(a, b, upper_open, lower_open, floor=0.0)
    da = np.exp(-0.5 * a * a - _HALF_LOG_2PI - logp)
    db = -np.exp(-0.5 * b * b - _HALF_LOG_2PI - logp)
    if upper_open is not None:
        da = np.where(upper_open, 0.0, da)
    if lower_open is not None:
        db = np.where(lower_open, 0.0, db)
    return [g * da, g * db]


ADJOINTS: dict[str, Callable] = {
    "matmul": lambda g, ins, out, at: [g @ ins[1].T, ins[0].T @ g],
    "add": lambda g, ins, out, at: [g, g],
    "sub": lambda g, ins, out, at: [g, -g],
    "hadamard": lambda g, ins, out, at: [g * ins[1], g * ins[0]],
    "scale": lambda g, ins, out, at: [at["k"] * g],
    "tanh": lambda g, ins, out, at: [g * (1.0 - out * out)],
    "exp": lambda g, ins, out, at: [g * out],
    "log": lambda g, ins, out, at: [g / ins[0]],
    "square": lambda g, ins, out, at: [2.0 * g * ins[0]],
    "sum": _a_sum,
    "broadcast_row": lambda g, ins, out, at: [g.sum(axis=0, keepdims=True)],
    "transpose": lambda g, ins, out, at: [g.T],
    "log_ndtr": lambda g, ins, out, at: [g * mills(ins[0])],
    "softplus": lambda g, ins, out, at: [g * special.expit(ins[0])],
    "logdet_spd": _a_logdet_spd,
    "inv_quad": _a_inv_quad,
    "log_ndtr_diff": _a_log_ndtr_diff,
}


def mills(x):
    """phi(x)/Phi(x), evaluated through erfcx so it stays finite for x << 0."""
    return np.sqrt(2.0 / np.pi) / special.erfcx(-np.asarray(x, dtype=np.float64) / np.sqrt(2.0))


def log_ndtr_diff(a, b, upper_open=None, lower_open=None, floor=1e-300):
    """log(Phi(a) - Phi(b)) for a > b, elementwise.

    ``upper_open`` marks entries where ``a`` is +inf and ``lower_open`` entries
    where ``b`` is -inf; the corresponding values in ``a``/``b`` are ignored.
    The result is floored at ``log(floor)`` when ``floor > 0``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    up = np.zeros(a.shape, bool) if upper_open is None else np.asarray(upper_open, bool)
    lo = np.zeros(a.shape, bool) if lower_open is None else np.asarray(lower_open, bool)
    out = np.empty(a.shape)

    both = up & lo
    out[both] = 0.0
    only_up = up & ~lo  # log(1 - Phi(b)) = log Phi(-b)
    out[only_up] = special.log_ndtr(-b[only_up])
    only_lo = lo & ~up
    out[only_lo] = special.log_ndtr(a[only_lo])

    mid = ~(up | lo)
    am, bm = a[mid], b[mid]
    # reflect so the interval sits in the lower tail, where log_ndtr is accurate
    flip = bm > 0
    hi = np.where(flip, -bm, am)
    lo_ = np.where(flip, -am, bm)
    la = special.log_ndtr(hi)
    lb = special.log_ndtr(lo_)
    with np.errstate(divide="ignore"):
        out[mid] = la + np.log1p(-np.exp(np.minimum(lb - la, 0.0)))
    if floor > 0:
        out = np.maximum(out, np.log(floor))
    return out


# ---------------------------------------------------------------------------
# op helpers


def forward_op(kind: str, *inputs, **attrs) -> Node:
    return _tape_of(*inputs).apply(kind, *inputs, **attrs)


def matmul(a, b):
    return forward_op("matmul", a, b)


def add(a, b):
    t = _tape_of(a, b)
    if np.isscalar(a):
        a = np.full(t.lift(b).shape, float(a))
    if np.isscalar(b):
        b = np.full(t.lift(a).shape, float(b))
    return t.apply("add", a, b)


def sub(a, b):
    t = _tape_of(a, b)
    if np.isscalar(a):
        a = np.full(t.lift(b).shape, float(a))
    if np.isscalar(b):
        b = np.full(t.lift(a).shape, float(b))
    return t.apply("sub", a, b)


def hadamard(a, b):
    return forward_op("hadamard", a, b)


def scale(a, k: float):
    return forward_op("scale", a, k=float(k))


def tanh(a):
    return forward_op("tanh", a)


def exp(a):
    return forward_op("exp", a)


def log(a):
    return forward_op("log", a)


def square(a):
    return forward_op("square", a)


def sum(a, axis=None):  # noqa: A001
    return forward_op("sum", a, axis=axis)


def broadcast_row(a, n: int):
    return forward_op("broadcast_row", a, n=int(n))


def transpose(a):
    return forward_op("transpose", a)


def log_ndtr(a):
    return forward_op("log_ndtr", a)


def softplus(a):
    return forward_op("softplus", a)


def logdet_spd(a):
    return forward_op("logdet_spd", a)


def inv_quad(a, m):
    """m^T a^{-1} m for symmetric positive definite ``a``."""
    return forward_op("inv_quad", a, m)


def ndtr_interval_log(a, b, upper_open=None, lower_open=None, floor=0.0):
    """Differentiable log(Phi(a) - Phi(b)); unfloored unless ``floor > 0``."""
    return forward_op("log_ndtr_diff", a, b, upper_open=upper_open, lower_open=lower_open, floor=floor)


def rsqrt(a):
    return exp(scale(log(a), -0.5))


def reciprocal(a):
    return exp(scale(log(a), -1.0))
