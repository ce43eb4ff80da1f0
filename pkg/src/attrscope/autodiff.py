"""Reverse-mode automatic differentiation over explicit graph records.

Tensors are float64 numpy arrays. A Graph is an append-only list of node
records (op kind, input node ids, optional constant payload); leaves are
named so the same graph can be re-evaluated with different leaf values,
which is what the attribution path loop needs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_LN_EPS = 1e-6


class GraphError(Exception):
    """Malformed graph: bad node reference, bad op, or bad leaf binding."""


class ShapeError(GraphError):
    """Operand shapes incompatible for the requested op."""


class NumericError(Exception):
    """A public operation produced a non-finite value; the run must abort."""


def as_tensor(value) -> np.ndarray:
    """Coerce to a float64 array and reject non-finite data."""
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite tensor value")
    return arr


def interpolate(actual: np.ndarray, baseline: np.ndarray, alpha: float) -> np.ndarray:
    """Straight-line point baseline + alpha * (actual - baseline)."""
    actual = np.asarray(actual, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if actual.shape != baseline.shape:
        raise ShapeError(f"interpolate shape mismatch {actual.shape} vs {baseline.shape}")
    return baseline + alpha * (actual - baseline)


@dataclass(frozen=True)
class Node:
    nid: int
    op: str
    inputs: tuple[int, ...]
    const: np.ndarray | None = None
    name: str | None = None          # leaves only
    shape: tuple[int, ...] | None = None  # leaves only
    differentiable: bool = False     # leaves only
    attrs: tuple = ()


class Graph:
    """Topologically ordered computation records with named leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}

    # -- construction -----------------------------------------------------

    def _push(self, op, inputs, const=None, attrs=(), **kw) -> int:
        for i in inputs:
            if not (0 <= i < len(self.nodes)):
                raise GraphError(f"node reference {i} out of range")
        node = Node(len(self.nodes), op, tuple(inputs), const=const, attrs=attrs, **kw)
        self.nodes.append(node)
        return node.nid

    def leaf(self, shape, name: str, differentiable: bool = True) -> int:
        if name in self.leaves:
            raise GraphError(f"duplicate leaf name {name!r}")
        nid = self._push("leaf", (), name=name, shape=tuple(shape),
                         differentiable=differentiable)
        self.leaves[name] = nid
        return nid

    def const(self, value) -> int:
        return self._push("const", (), const=np.asarray(value, dtype=np.float64))

    def add(self, a: int, b: int) -> int:
        return self._push("add", (a, b))

    def sub(self, a: int, b: int) -> int:
        return self._push("sub", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._push("mul", (a, b))

    def matmul(self, a: int, b: int) -> int:
        return self._push("matmul", (a, b))

    def transpose(self, a: int) -> int:
        return self._push("transpose", (a,))

    def gelu(self, a: int) -> int:
        return self._push("gelu", (a,))

    def tanh(self, a: int) -> int:
        return self._push("tanh", (a,))

    def softmax(self, a: int) -> int:
        """Softmax over the last axis."""
        return self._push("softmax", (a,))

    def log_softmax(self, a: int) -> int:
        return self._push("log_softmax", (a,))

    def layer_norm(self, a: int) -> int:
        """Normalize the last axis to zero mean / unit variance (no affine)."""
        return self._push("layer_norm", (a,))

    def sum_all(self, a: int) -> int:
        return self._push("sum_all", (a,))

    def pick(self, a: int, index: tuple[int, ...]) -> int:
        """Scalar element extraction."""
        return self._push("pick", (a,), attrs=tuple(index))

    # -- queries ----------------------------------------------------------

    def differentiable_leaves(self) -> list[str]:
        return [n.name for n in self.nodes if n.op == "leaf" and n.differentiable]


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _gelu(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _forward_op(node: Node, vals: list) -> np.ndarray:
    op = node.op
    ins = [vals[i] for i in node.inputs]
    if op == "add":
        return ins[0] + ins[1]
    if op == "sub":
        return ins[0] - ins[1]
    if op == "mul":
        return ins[0] * ins[1]
    if op == "matmul":
        a, b = ins
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
        return a @ b
    if op == "transpose":
        return ins[0].T
    if op == "gelu":
        return _gelu(ins[0])
    if op == "tanh":
        return np.tanh(ins[0])
    if op == "softmax":
        return _softmax(ins[0])
    if op == "log_softmax":
        return _log_softmax(ins[0])
    if op == "layer_norm":
        x = ins[0]
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + _LN_EPS)
    if op == "sum_all":
        return np.asarray(ins[0].sum())
    if op == "pick":
        return np.asarray(ins[0][node.attrs])
    raise GraphError(f"unknown op {op!r}")


def evaluate(graph: Graph, leaf_values: dict[str, np.ndarray]) -> list[np.ndarray]:
    """Forward pass; returns one value per node, indexed by node id."""
    vals: list[np.ndarray] = []
    for node in graph.nodes:
        if node.op == "leaf":
            if node.name not in leaf_values:
                raise GraphError(f"missing value for leaf {node.name!r}")
            v = np.asarray(leaf_values[node.name], dtype=np.float64)
            if v.shape != node.shape:
                raise ShapeError(
                    f"leaf {node.name!r} expects shape {node.shape}, got {v.shape}")
        elif node.op == "const":
            v = node.const
        else:
            v = _forward_op(node, vals)
            if not np.all(np.isfinite(v)):
                raise NumericError(f"non-finite output at node {node.nid} ({node.op})")
        vals.append(v)
    return vals


def grad(graph: Graph, scalar_node: int, leaf_values: dict[str, np.ndarray],
         forward: list[np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """d(scalar)/d(leaf) for every differentiable leaf; zeros when unused."""
    vals = forward if forward is not None else evaluate(graph, leaf_values)
    out = vals[scalar_node]
    if out.size != 1:
        raise GraphError(f"grad target node {scalar_node} is not scalar (shape {out.shape})")

    adj: dict[int, np.ndarray] = {scalar_node: np.ones_like(out)}
    for node in reversed(graph.nodes[: scalar_node + 1]):
        if node.op in ("leaf", "const"):
            continue
        g = adj.pop(node.nid, None)
        if g is None:
            continue
        ins = [vals[i] for i in node.inputs]

        def acc(idx: int, contrib: np.ndarray):
            i = node.inputs[idx]
            prev = adj.get(i)
            adj[i] = contrib if prev is None else prev + contrib

        op = node.op
        if op == "add":
            acc(0, _unbroadcast(g, ins[0].shape))
            acc(1, _unbroadcast(g, ins[1].shape))
        elif op == "sub":
            acc(0, _unbroadcast(g, ins[0].shape))
            acc(1, _unbroadcast(-g, ins[1].shape))
        elif op == "mul":
            acc(0, _unbroadcast(g * ins[1], ins[0].shape))
            acc(1, _unbroadcast(g * ins[0], ins[1].shape))
        elif op == "matmul":
            acc(0, g @ ins[1].T)
            acc(1, ins[0].T @ g)
        elif op == "transpose":
            acc(0, g.T)
        elif op == "gelu":
            acc(0, g * _gelu_grad(ins[0]))
        elif op == "tanh":
            y = vals[node.nid]
            acc(0, g * (1.0 - y ** 2))
        elif op == "softmax":
            y = vals[node.nid]
            acc(0, y * (g - (g * y).sum(axis=-1, keepdims=True)))
        elif op == "log_softmax":
            y = vals[node.nid]
            acc(0, g - np.exp(y) * g.sum(axis=-1, keepdims=True))
        elif op == "layer_norm":
            x = ins[0]
            n = x.shape[-1]
            mu = x.mean(axis=-1, keepdims=True)
            var = x.var(axis=-1, keepdims=True)
            inv = 1.0 / np.sqrt(var + _LN_EPS)
            xhat = (x - mu) * inv
            gm = g.mean(axis=-1, keepdims=True)
            gx = (g * xhat).mean(axis=-1, keepdims=True)
            acc(0, inv * (g - gm - xhat * gx))
        elif op == "sum_all":
            acc(0, np.broadcast_to(g, ins[0].shape).copy())
        elif op == "pick":
            gx = np.zeros_like(ins[0])
            gx[node.attrs] = g
            acc(0, gx)
        else:
            raise GraphError(f"no gradient rule for op {op!r}")

    result: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.op == "leaf" and node.differentiable:
            g = adj.get(node.nid)
            result[node.name] = g if g is not None else np.zeros(node.shape)
    return result
