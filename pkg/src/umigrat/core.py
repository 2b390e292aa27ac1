"""Dense 64-bit tensor arithmetic with a small reverse-mode tape.

A :class:`Record` is an append-only list of primitive nodes. Values are plain
``numpy.ndarray`` (float64); every op acts on the trailing axis so leading axes
behave as a batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

DENSE_JACOBIAN_LIMIT = 4096

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when a value does not fit the shape a node expects."""

    def __init__(self, node: int, message: str):
        super().__init__(f"node {node}: {message}")
        self.node = node


@dataclass(frozen=True)
class Node:
    op: str
    args: tuple = ()
    attrs: tuple = ()


@dataclass
class Record:
    """Topologically ordered computation record.

    Nodes can only reference earlier nodes, so the list order is a valid
    evaluation order.
    """

    nodes: list = field(default_factory=list)
    inputs: list = field(default_factory=list)  # (node index, declared shape)
    output: int | None = None

    def _push(self, op, args=(), attrs=()):
        for a in args:
            if not 0 <= a < len(self.nodes):
                raise ValueError(f"argument {a} does not precede node {len(self.nodes)}")
        self.nodes.append(Node(op, tuple(args), tuple(attrs)))
        return len(self.nodes) - 1

    # leaves
    def input(self, shape=None) -> int:
        idx = self._push("input", attrs=(len(self.inputs),))
        self.inputs.append((idx, None if shape is None else tuple(shape)))
        return idx

    def const(self, value) -> int:
        arr = np.asarray(value, dtype=np.float64)
        arr.setflags(write=False)
        return self._push("const", attrs=(arr,))

    # primitives
    def affine(self, x: int, w: int, b: int | None = None) -> int:
        args = (x, w) if b is None else (x, w, b)
        return self._push("affine", args)

    def tanh(self, x: int) -> int:
        return self._push("tanh", (x,))

    def gelu(self, x: int) -> int:
        return self._push("gelu", (x,))

    def layernorm(self, x: int, eps: float = 1e-5) -> int:
        return self._push("layernorm", (x,), (float(eps),))

    def mean(self, x: int, axis=None) -> int:
        return self._push("mean", (x,), (axis,))

    def norm(self, x: int, p: int = 2) -> int:
        if p not in (1, 2):
            raise ValueError(f"unsupported norm order {p}")
        return self._push("norm", (x,), (p,))

    def add(self, a: int, b: int) -> int:
        return self._push("add", (a, b))

    def scale(self, x: int, factor) -> int:
        """Multiply by a python scalar, or elementwise by another node (``NodeRef``)."""
        if isinstance(factor, NodeRef):
            return self._push("scale", (x, factor.index))
        return self._push("scale", (x,), (float(factor),))

    # conveniences built from primitives
    def sub(self, a: int, b: int) -> int:
        return self.add(a, self.scale(b, -1.0))

    def sum(self, x: int, axis=None, count: int | None = None) -> int:
        if count is None:
            raise ValueError("sum needs the reduced element count")
        return self.scale(self.mean(x, axis), float(count))

    def set_output(self, node: int) -> "Record":
        self.output = node
        return self


@dataclass(frozen=True)
class NodeRef:
    """Marks a node index used as a multiplicative factor in :meth:`Record.scale`."""

    index: int


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_shape(declared, value):
    if declared is None:
        return True
    if len(declared) != value.ndim:
        # declared per-sample shape; extra leading axes are batch
        if value.ndim < len(declared):
            return False
        tail = value.shape[value.ndim - len(declared):]
    else:
        tail = value.shape
    return all(d is None or d == s for d, s in zip(declared, tail))


def _evaluate(record: Record, inputs):
    if len(inputs) != len(record.inputs):
        raise ValueError(f"expected {len(record.inputs)} inputs, got {len(inputs)}")
    vals = [None] * len(record.nodes)
    aux = {}
    for i, node in enumerate(record.nodes):
        op = node.op
        try:
            if op == "input":
                v = np.asarray(inputs[node.attrs[0]], dtype=np.float64)
                declared = record.inputs[node.attrs[0]][1]
                if not _check_shape(declared, v):
                    raise ShapeError(i, f"input shape {v.shape} does not match {declared}")
            elif op == "const":
                v = node.attrs[0]
            elif op == "affine":
                x, w = vals[node.args[0]], vals[node.args[1]]
                if w.ndim != 2 or x.shape[-1] != w.shape[1]:
                    raise ShapeError(i, f"affine {x.shape} x {w.shape}^T")
                v = x @ w.T
                if len(node.args) == 3:
                    v = v + vals[node.args[2]]
            elif op == "tanh":
                v = np.tanh(vals[node.args[0]])
            elif op == "gelu":
                x = vals[node.args[0]]
                cdf = 0.5 * (1.0 + erf(x / _SQRT2))
                aux[i] = cdf
                v = x * cdf
            elif op == "layernorm":
                x = vals[node.args[0]]
                n = x.shape[-1]
                xc = x - x.sum(axis=-1, keepdims=True) / n
                inv = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) / n + node.attrs[0])
                aux[i] = inv
                v = xc * inv
            elif op == "mean":
                v = np.mean(vals[node.args[0]], axis=node.attrs[0])
            elif op == "norm":
                x = vals[node.args[0]]
                if node.attrs[0] == 1:
                    v = np.abs(x).sum(axis=-1)
                else:
                    v = np.sqrt((x * x).sum(axis=-1))
            elif op == "add":
                v = vals[node.args[0]] + vals[node.args[1]]
            elif op == "scale":
                if len(node.args) == 2:
                    v = vals[node.args[0]] * vals[node.args[1]]
                else:
                    v = vals[node.args[0]] * node.attrs[0]
            else:
                raise ShapeError(i, f"unknown op {op!r}")
        except ShapeError:
            raise
        except ValueError as exc:
            raise ShapeError(i, str(exc)) from exc
        vals[i] = v
    return vals, aux


def evaluate(record: Record, inputs) -> list:
    """Evaluate every node; returns the list of node values."""
    return _evaluate(record, inputs)[0]


def forward(record: Record, inputs) -> np.ndarray:
    """Value of the record's output node."""
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.asarray(evaluate(record, inputs)[record.output])
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite value in forward pass")
    return out


def _needs(record, wrt_nodes):
    key = tuple(wrt_nodes)
    cache = record.__dict__.setdefault("_need_cache", {})
    if key in cache and cache[key][0] == len(record.nodes):
        return cache[key][1]
    need = [False] * len(record.nodes)
    for n in wrt_nodes:
        need[n] = True
    for i, node in enumerate(record.nodes):
        if not need[i] and any(need[a] for a in node.args):
            need[i] = True
    cache[key] = (len(record.nodes), need)
    return need


def _backward(record, values, aux, cotangent, wrt):
    wrt_nodes = [record.inputs[k][0] for k in wrt]
    need = _needs(record, wrt_nodes)
    adj = [None] * len(record.nodes)
    out = record.output
    adj[out] = np.broadcast_to(np.asarray(cotangent, dtype=np.float64), np.shape(values[out])).copy()

    def acc(idx, g):
        if not need[idx]:
            return
        adj[idx] = g if adj[idx] is None else adj[idx] + g

    for i in range(out, -1, -1):
        g = adj[i]
        if g is None or not need[i]:
            continue
        node = record.nodes[i]
        op, args = node.op, node.args
        if op in ("input", "const"):
            continue
        if op == "affine":
            x, w = values[args[0]], values[args[1]]
            acc(args[0], g @ w)
            if need[args[1]]:
                acc(args[1], g.reshape(-1, w.shape[0]).T @ x.reshape(-1, w.shape[1]))
            if len(args) == 3 and need[args[2]]:
                acc(args[2], _unbroadcast(g, np.shape(values[args[2]])))
        elif op == "tanh":
            y = values[i]
            acc(args[0], g * (1.0 - y * y))
        elif op == "gelu":
            x = values[args[0]]
            acc(args[0], g * (aux[i] + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)))
        elif op == "layernorm":
            y = values[i]
            n = y.shape[-1]
            gm = g.sum(axis=-1, keepdims=True) / n
            gy = (g * y).sum(axis=-1, keepdims=True) / n
            acc(args[0], aux[i] * (g - gm - y * gy))
        elif op == "mean":
            x = values[args[0]]
            axis = node.attrs[0]
            n = x.size if axis is None else x.shape[axis]
            gg = g if axis is None else np.expand_dims(g, axis)
            acc(args[0], np.broadcast_to(gg / n, x.shape).copy())
        elif op == "norm":
            x = values[args[0]]
            if node.attrs[0] == 1:
                acc(args[0], g[..., None] * np.sign(x))
            else:
                r = values[i][..., None]
                safe = np.where(r > 0, r, 1.0)
                acc(args[0], np.where(r > 0, g[..., None] * x / safe, 0.0))
        elif op == "add":
            acc(args[0], _unbroadcast(g, np.shape(values[args[0]])))
            acc(args[1], _unbroadcast(g, np.shape(values[args[1]])))
        elif op == "scale":
            if len(args) == 2:
                a, b = values[args[0]], values[args[1]]
                acc(args[0], _unbroadcast(g * b, np.shape(a)))
                if need[args[1]]:
                    acc(args[1], _unbroadcast(g * a, np.shape(b)))
            else:
                acc(args[0], g * node.attrs[0])
    grads = []
    for n in wrt_nodes:
        g = adj[n]
        grads.append(np.zeros(np.shape(values[n])) if g is None else g)
    return grads


def vjp(record: Record, inputs, cotangent, wrt) -> list:
    """Vector-Jacobian product of the output against the inputs listed in ``wrt``."""
    values, aux = _evaluate(record, inputs)
    return _backward(record, values, aux, cotangent, wrt)


def value_and_grad(record: Record, inputs, wrt):
    """Output value, all node values and the output's gradients.

    A non-scalar output is seeded with ones, i.e. its entries are summed; with
    per-sample losses this yields every sample's own input gradient.
    """
    values, aux = _evaluate(record, inputs)
    out = np.asarray(values[record.output])
    grads = _backward(record, values, aux, np.ones_like(out), wrt)
    return out, values, grads


def gradient(record: Record, inputs, seed_index: int) -> np.ndarray:
    """Gradient of a scalar-valued record with respect to ``inputs[seed_index]``."""
    values, aux = _evaluate(record, inputs)
    out = np.asarray(values[record.output])
    if out.size != 1:
        raise ValueError(f"gradient needs a scalar output, got shape {out.shape}")
    return _backward(record, values, aux, np.ones_like(out), [seed_index])[0]


def module_jacobian(module, x, limit: int = DENSE_JACOBIAN_LIMIT) -> np.ndarray:
    """Dense Jacobian (out_dim x in_dim) of ``module`` at the point ``x``.

    ``module`` must expose ``in_dim``, ``out_dim`` and ``build(record, node)``.
    All rows come from a single batched reverse pass seeded with the identity.
    """
    if module.in_dim > limit or module.out_dim > limit:
        raise ValueError(
            f"module is {module.out_dim}x{module.in_dim}; dense Jacobian limit is {limit}, "
            f"need at least {max(module.in_dim, module.out_dim)}"
        )
    x = np.asarray(x, dtype=np.float64).reshape(module.in_dim)
    rec = Record()
    xi = rec.input((module.in_dim,))
    rec.set_output(module.build(rec, xi))
    batch = np.broadcast_to(x, (module.out_dim, module.in_dim))
    return vjp(rec, [batch], np.eye(module.out_dim), [0])[0]
