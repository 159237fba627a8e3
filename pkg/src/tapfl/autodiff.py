"""Minimal dense-tensor engine with reverse-mode differentiation.

A :class:`Graph` is an eagerly evaluated tape: every primitive call computes
its value immediately and appends a node. Node ids are plain ints, and the
topological order is the insertion order.

    g = Graph()
    w = g.param(np.array([1.0, 2.0]))
    c = g.const(np.zeros(2))
    d = g.sub(w, c)
    loss = g.scale(g.sum(g.mul(d, d)), 0.5)
    grads = backward(g, loss)          # {w: array([1., 2.])}

Tensors are float64 numpy arrays. Only row-wise bias addition broadcasts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


class GraphError(ValueError):
    """Raised for malformed graphs or bad bindings."""


class ShapeError(GraphError):
    def __init__(self, node: int, kind: str, detail: str):
        super().__init__(f"node {node} ({kind}): {detail}")
        self.node = node
        self.kind = kind


class NonFiniteError(FloatingPointError):
    def __init__(self, node: int, kind: str):
        super().__init__(f"node {node} ({kind}) produced a non-finite value")
        self.node = node
        self.kind = kind


@dataclass(frozen=True)
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: Mapping[str, Any] = field(default_factory=dict)
    trainable: bool = False
    name: str | None = None


# ---------------------------------------------------------------------------
# primitive forward rules: (input values, attrs) -> value; raise ValueError on bad shapes


def _fwd_matmul(xs, at):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul {a.shape} @ {b.shape}")
    return a @ b


def _fwd_add(xs, at):
    a, b = xs
    if a.shape == b.shape:
        return a + b
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return a + b
    raise ValueError(f"add {a.shape} + {b.shape}")


def _fwd_sub(xs, at):
    a, b = xs
    if a.shape != b.shape:
        raise ValueError(f"sub {a.shape} - {b.shape}")
    return a - b


def _fwd_mul(xs, at):
    a, b = xs
    if a.shape != b.shape:
        raise ValueError(f"mul {a.shape} * {b.shape}")
    return a * b


def _fwd_scale(xs, at):
    return xs[0] * at["c"]


def _fwd_sum(xs, at):
    return np.asarray(xs[0].sum())


def _fwd_mean(xs, at):
    return np.asarray(xs[0].mean())


def _fwd_relu(xs, at):
    return np.maximum(xs[0], 0.0)


def _gelu_parts(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    return u, np.tanh(u)


def _fwd_gelu(xs, at):
    x = xs[0]
    _, t = _gelu_parts(x)
    return 0.5 * x * (1.0 + t)


def _fwd_transpose(xs, at):
    if xs[0].ndim != 2:
        raise ValueError(f"transpose needs a matrix, got {xs[0].shape}")
    return xs[0].T.copy()


def _fwd_reshape(xs, at):
    shape = tuple(at["shape"])
    if math.prod(shape) != xs[0].size:
        raise ValueError(f"reshape {xs[0].shape} -> {shape}")
    return xs[0].reshape(shape).copy()


def _fwd_slice(xs, at):
    x = xs[0]
    axis, start, stop = at["axis"], at["start"], at["stop"]
    if not 0 <= start < stop <= x.shape[axis]:
        raise ValueError(f"slice [{start}:{stop}] on axis {axis} of {x.shape}")
    return np.take(x, np.arange(start, stop), axis=axis)


def _fwd_concat(xs, at):
    axis = at["axis"]
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or other[:axis] + other[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ValueError(f"concat shapes {[x.shape for x in xs]} on axis {axis}")
    return np.concatenate(xs, axis=axis)


def _ln_stats(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc, inv


def _fwd_layernorm(xs, at):
    x, gain, bias = xs
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layernorm x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    xc, inv = _ln_stats(x, at["eps"])
    return xc * inv * gain + bias


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _fwd_softmax(xs, at):
    return _softmax(xs[0])


def _fwd_log_softmax(xs, at):
    return _log_softmax(xs[0])


def _fwd_mse(xs, at):
    a, b = xs
    if a.shape != b.shape:
        raise ValueError(f"mse {a.shape} vs {b.shape}")
    d = a - b
    return np.asarray((d * d).mean())


def _fwd_cross_entropy(xs, at):
    logits, target = xs
    if logits.shape != target.shape or logits.ndim != 2:
        raise ValueError(f"cross_entropy logits {logits.shape} vs target {target.shape}")
    return np.asarray(-(target * _log_softmax(logits)).sum() / logits.shape[0])


# ---------------------------------------------------------------------------
# primitive backward rules: (grad of output, input values, output value, attrs) -> input grads


def _bwd_matmul(g, xs, y, at):
    a, b = xs
    return [g @ b.T, a.T @ g]


def _bwd_add(g, xs, y, at):
    a, b = xs
    gb = g if b.shape == g.shape else g.sum(axis=0)
    return [g, gb]


def _bwd_sub(g, xs, y, at):
    return [g, -g]


def _bwd_mul(g, xs, y, at):
    a, b = xs
    return [g * b, g * a]


def _bwd_scale(g, xs, y, at):
    return [g * at["c"]]


def _bwd_sum(g, xs, y, at):
    return [np.full(xs[0].shape, float(g))]


def _bwd_mean(g, xs, y, at):
    return [np.full(xs[0].shape, float(g) / xs[0].size)]


def _bwd_relu(g, xs, y, at):
    return [g * (xs[0] > 0.0)]


def _bwd_gelu(g, xs, y, at):
    x = xs[0]
    _, t = _gelu_parts(x)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return [g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)]


def _bwd_transpose(g, xs, y, at):
    return [g.T]


def _bwd_reshape(g, xs, y, at):
    return [g.reshape(xs[0].shape)]


def _bwd_slice(g, xs, y, at):
    out = np.zeros_like(xs[0])
    idx = [slice(None)] * out.ndim
    idx[at["axis"]] = slice(at["start"], at["stop"])
    out[tuple(idx)] = g
    return [out]


def _bwd_concat(g, xs, y, at):
    axis = at["axis"]
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return list(np.split(g, cuts, axis=axis))


def _bwd_layernorm(g, xs, y, at):
    x, gain, bias = xs
    xc, inv = _ln_stats(x, at["eps"])
    xhat = xc * inv
    rows = g.reshape(-1, g.shape[-1])
    g_gain = (rows * xhat.reshape(rows.shape)).sum(axis=0)
    g_bias = rows.sum(axis=0)
    gh = g * gain
    gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    return [gx, g_gain, g_bias]


def _bwd_softmax(g, xs, y, at):
    return [y * (g - (g * y).sum(axis=-1, keepdims=True))]


def _bwd_log_softmax(g, xs, y, at):
    return [g - np.exp(y) * g.sum(axis=-1, keepdims=True)]


def _bwd_mse(g, xs, y, at):
    a, b = xs
    d = (2.0 / a.size) * float(g) * (a - b)
    return [d, -d]


def _bwd_cross_entropy(g, xs, y, at):
    logits, target = xs
    n = logits.shape[0]
    p = _softmax(logits)
    tsum = target.sum(axis=-1, keepdims=True)
    g_logits = float(g) * (p * tsum - target) / n
    g_target = -float(g) * _log_softmax(logits) / n
    return [g_logits, g_target]


_Rule = tuple[Callable[..., np.ndarray], Callable[..., list]]

PRIMITIVES: dict[str, _Rule] = {
    "matmul": (_fwd_matmul, _bwd_matmul),
    "add": (_fwd_add, _bwd_add),
    "sub": (_fwd_sub, _bwd_sub),
    "mul": (_fwd_mul, _bwd_mul),
    "scale": (_fwd_scale, _bwd_scale),
    "sum": (_fwd_sum, _bwd_sum),
    "mean": (_fwd_mean, _bwd_mean),
    "relu": (_fwd_relu, _bwd_relu),
    "gelu": (_fwd_gelu, _bwd_gelu),
    "transpose": (_fwd_transpose, _bwd_transpose),
    "reshape": (_fwd_reshape, _bwd_reshape),
    "slice": (_fwd_slice, _bwd_slice),
    "concat": (_fwd_concat, _bwd_concat),
    "layernorm": (_fwd_layernorm, _bwd_layernorm),
    "softmax": (_fwd_softmax, _bwd_softmax),
    "log_softmax": (_fwd_log_softmax, _bwd_log_softmax),
    "mse": (_fwd_mse, _bwd_mse),
    "cross_entropy": (_fwd_cross_entropy, _bwd_cross_entropy),
}


def _as_tensor(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if any(s <= 0 for s in arr.shape):
        raise GraphError(f"tensor shape must be positive, got {arr.shape}")
    return arr


class Graph:
    """Append-only computation tape."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, node: int) -> np.ndarray:
        return self.nodes[node].value

    @property
    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "leaf"]

    @property
    def trainable_leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "leaf" and n.trainable]

    # -- leaves ---------------------------------------------------------------

    def leaf(self, value, *, trainable: bool = False, name: str | None = None) -> int:
        if isinstance(value, np.ndarray) and value.dtype == np.float64 and not value.flags.writeable:
            arr = value  # already immutable, share it
        else:
            arr = _as_tensor(value)
            arr.flags.writeable = False
        if not _finite(arr):
            raise NonFiniteError(len(self.nodes), "leaf")
        self.nodes.append(Node("leaf", (), arr, {}, trainable, name))
        return len(self.nodes) - 1

    def param(self, value, name: str | None = None) -> int:
        return self.leaf(value, trainable=True, name=name)

    def const(self, value, name: str | None = None) -> int:
        return self.leaf(value, trainable=False, name=name)

    # -- primitives -----------------------------------------------------------

    def apply(self, kind: str, *inputs: int, **attrs) -> int:
        fwd, _ = PRIMITIVES[kind]
        nid = len(self.nodes)
        for i in inputs:
            if not 0 <= i < nid:
                raise GraphError(f"node {nid} ({kind}) refers to unknown input {i}")
        value = _run_forward(nid, kind, fwd, [self.nodes[i].value for i in inputs], attrs)
        value.flags.writeable = False
        self.nodes.append(Node(kind, tuple(inputs), value, attrs))
        return nid

    def matmul(self, a: int, b: int) -> int:
        return self.apply("matmul", a, b)

    def add(self, a: int, b: int) -> int:
        return self.apply("add", a, b)

    def sub(self, a: int, b: int) -> int:
        return self.apply("sub", a, b)

    def mul(self, a: int, b: int) -> int:
        return self.apply("mul", a, b)

    def scale(self, a: int, c: float) -> int:
        return self.apply("scale", a, c=float(c))

    def sum(self, a: int) -> int:
        return self.apply("sum", a)

    def mean(self, a: int) -> int:
        return self.apply("mean", a)

    def relu(self, a: int) -> int:
        return self.apply("relu", a)

    def gelu(self, a: int) -> int:
        return self.apply("gelu", a)

    def transpose(self, a: int) -> int:
        return self.apply("transpose", a)

    def reshape(self, a: int, shape: tuple[int, ...]) -> int:
        return self.apply("reshape", a, shape=tuple(int(s) for s in shape))

    def slice(self, a: int, start: int, stop: int, axis: int = 1) -> int:
        return self.apply("slice", a, start=int(start), stop=int(stop), axis=int(axis))

    def concat(self, parts: list[int], axis: int = 1) -> int:
        return self.apply("concat", *parts, axis=int(axis))

    def layernorm(self, x: int, gain: int, bias: int, eps: float = 1e-5) -> int:
        return self.apply("layernorm", x, gain, bias, eps=float(eps))

    def softmax(self, a: int) -> int:
        return self.apply("softmax", a)

    def log_softmax(self, a: int) -> int:
        return self.apply("log_softmax", a)

    def mse(self, a: int, b: int) -> int:
        return self.apply("mse", a, b)

    def cross_entropy(self, logits: int, target: int) -> int:
        """Mean over rows of ``-sum(target * log_softmax(logits))``."""
        return self.apply("cross_entropy", logits, target)

    def linear(self, x: int, weight: int, bias: int | None = None) -> int:
        """``x @ weight.T (+ bias)`` with ``weight`` stored as d_out x d_in."""
        out = self.matmul(x, self.transpose(weight))
        return out if bias is None else self.add(out, bias)


def _run_forward(nid: int, kind: str, fwd, values, attrs) -> np.ndarray:
    try:
        out = np.asarray(fwd(values, attrs), dtype=np.float64)
    except ValueError as exc:
        raise ShapeError(nid, kind, str(exc)) from None
    if not _finite(out):
        raise NonFiniteError(nid, kind)
    return out


def _finite(arr: np.ndarray) -> bool:
    # a sum is nan/inf whenever any entry is
    total = float(arr.sum())
    return math.isfinite(total) or bool(np.all(np.isfinite(arr)))


def _resolve_root(graph: Graph, root: int | None) -> int:
    if not graph.nodes:
        raise GraphError("empty graph")
    root = len(graph.nodes) - 1 if root is None else root
    if not 0 <= root < len(graph.nodes):
        raise GraphError(f"unknown root {root}")
    return root


def forward_values(graph: Graph, bindings: Mapping[int, Any] | None = None,
                   root: int | None = None) -> list[np.ndarray]:
    """Recompute node values up to ``root`` with some leaves rebound."""
    root = _resolve_root(graph, root)
    bindings = bindings or {}
    values: list[np.ndarray] = []
    for nid, node in enumerate(graph.nodes[: root + 1]):
        if node.kind == "leaf":
            if nid in bindings:
                v = np.asarray(bindings[nid], dtype=np.float64)
                if v.shape != node.value.shape:
                    raise ShapeError(nid, "leaf", f"binding shape {v.shape} != {node.value.shape}")
                if not _finite(v):
                    raise NonFiniteError(nid, "leaf")
            else:
                v = node.value
        else:
            fwd, _ = PRIMITIVES[node.kind]
            v = _run_forward(nid, node.kind, fwd, [values[i] for i in node.inputs], node.attrs)
        values.append(v)
    return values


def eval_graph(graph: Graph, bindings: Mapping[int, Any] | None = None,
               root: int | None = None) -> np.ndarray:
    """Value of ``root`` (default: last node) with the given leaf bindings."""
    unknown = [k for k in (bindings or {}) if k >= len(graph.nodes) or graph.nodes[k].kind != "leaf"]
    if unknown:
        raise GraphError(f"bindings refer to non-leaf nodes {unknown}")
    return forward_values(graph, bindings, root)[-1]


def backward(graph: Graph, root: int | None = None,
             values: list[np.ndarray] | None = None) -> dict[int, np.ndarray]:
    """Reverse-mode gradients of a scalar ``root`` for every trainable leaf."""
    root = _resolve_root(graph, root)
    if values is None:
        values = [n.value for n in graph.nodes[: root + 1]]
    if values[root].size != 1:
        raise GraphError(f"backward needs a scalar root, node {root} has shape {values[root].shape}")
    grads: list[np.ndarray | None] = [None] * (root + 1)
    grads[root] = np.ones_like(values[root])
    for nid in range(root, -1, -1):
        g = grads[nid]
        node = graph.nodes[nid]
        if g is None or node.kind == "leaf":
            continue
        _, bwd = PRIMITIVES[node.kind]
        ins = [values[i] for i in node.inputs]
        for i, gi in zip(node.inputs, bwd(g, ins, values[nid], node.attrs)):
            grads[i] = gi if grads[i] is None else grads[i] + gi
    out = {}
    for nid in graph.trainable_leaves:
        if nid > root:
            continue
        g = grads[nid]
        out[nid] = np.zeros_like(values[nid]) if g is None else np.asarray(g).reshape(values[nid].shape)
    return out


def numeric_grad(graph: Graph, leaf: int, step: float = 1e-5, root: int | None = None) -> np.ndarray:
    """Central finite-difference gradient of ``root`` with respect to ``leaf``."""
    base = graph.nodes[leaf].value
    flat = base.reshape(-1)
    out = np.zeros(flat.size)
    for j in range(flat.size):
        plus = flat.copy()
        plus[j] += step
        minus = flat.copy()
        minus[j] -= step
        fp = float(eval_graph(graph, {leaf: plus.reshape(base.shape)}, root))
        fm = float(eval_graph(graph, {leaf: minus.reshape(base.shape)}, root))
        out[j] = (fp - fm) / (2 * step)
    return out.reshape(base.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest coordinate-wise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(graph: Graph, leaf: int, step: float = 1e-5, root: int | None = None) -> float:
    """Max relative error between ``backward`` and central differences for ``leaf``."""
    if not 0.0 < step <= 1e-2:
        raise GraphError(f"finite-difference step must lie in (0, 1e-2], got {step}")
    node = graph.nodes[leaf]
    if node.kind != "leaf":
        raise GraphError(f"node {leaf} is not a leaf")
    if node.trainable:
        analytic = backward(graph, root)[leaf]
    else:
        # treat a constant as trainable for the purpose of the check
        nodes = list(graph.nodes)
        nodes[leaf] = Node("leaf", (), node.value, {}, True, node.name)
        twin = Graph()
        twin.nodes = nodes
        analytic = backward(twin, root)[leaf]
    return relative_error(analytic, numeric_grad(graph, leaf, step, root))
