"""Minimal dense-tensor reverse-mode automatic differentiation.

Nodes wrap float64 numpy arrays. Each op records vector-Jacobian-product
closures for its parents; backward() walks the graph in reverse
topological order and accumulates gradients on every reachable node (not
just leaves), so intermediate gradients such as per-position logits can be
inspected after a backward pass.

Broadcasting is deliberately restricted: elementwise ops demand equal
shapes, add() additionally accepts a row vector added to every row of a
matrix. Anything else is a loud shape error.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Node:
    __slots__ = ("value", "parents", "_vjps", "grad")

    def __init__(self, value, parents: tuple = (), vjps: tuple = ()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self._vjps = vjps
        self.grad: Array | None = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, leaf={not self.parents})"


def leaf(value) -> Node:
    return Node(value)


def constant(value) -> Node:
    return Node(value)


def _shape_error(op: str, *shapes) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {' vs '.join(map(str, shapes))}")


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise _shape_error("matmul", a.value.shape, b.value.shape)
    av, bv = a.value, b.value
    return Node(
        av @ bv,
        (a, b),
        (lambda g: g @ bv.T, lambda g: av.T @ g),
    )


def add(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        return Node(av + bv, (a, b), (lambda g: g, lambda g: g))
    # row-broadcast: (n, m) + (m,)
    if av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
        return Node(av + bv, (a, b), (lambda g: g, lambda g: g.sum(axis=0)))
    if bv.ndim == 2 and av.ndim == 1 and bv.shape[1] == av.shape[0]:
        return Node(av + bv, (a, b), (lambda g: g.sum(axis=0), lambda g: g))
    raise _shape_error("add", av.shape, bv.shape)


def mul(a: Node, b: Node) -> Node:
    """Elementwise product; shapes must match exactly."""
    if a.value.shape != b.value.shape:
        raise _shape_error("mul", a.value.shape, b.value.shape)
    av, bv = a.value, b.value
    return Node(av * bv, (a, b), (lambda g: g * bv, lambda g: g * av))


def scalar_mul(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * c, (a,), (lambda g: g * c,))


def reshape(a: Node, shape: tuple) -> Node:
    old = a.value.shape
    if int(np.prod(shape)) != a.value.size:
        raise _shape_error("reshape", old, shape)
    return Node(a.value.reshape(shape), (a,), (lambda g: g.reshape(old),))


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    if not nodes:
        raise ValueError("concat of zero nodes")
    values = [n.value for n in nodes]
    ndim = values[0].ndim
    for v in values[1:]:
        if v.ndim != ndim:
            raise _shape_error("concat", values[0].shape, v.shape)
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        sl = [slice(None)] * ndim
        sl[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return Node(out, tuple(nodes), tuple(make_vjp(k) for k in range(len(nodes))))


def gather_rows(a: Node, idx) -> Node:
    """Row lookup a[idx]; duplicate indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.intp)
    av = a.value
    if idx.size and (idx.min() < 0 or idx.max() >= av.shape[0]):
        raise ValueError(f"gather_rows: index out of range for {av.shape[0]} rows")

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return out

    return Node(av[idx], (a,), (vjp,))


def select(a: Node, rows, cols=None) -> Node:
    """Pick entries: a[rows] from a vector, or a[rows, cols] from a matrix."""
    rows = np.asarray(rows, dtype=np.intp)
    av = a.value
    if cols is None:
        if av.ndim != 1:
            raise _shape_error("select(rows) needs 1-D input", av.shape)
        if rows.size and (rows.min() < 0 or rows.max() >= av.shape[0]):
            raise ValueError("select: index out of range")

        def vjp(g):
            out = np.zeros_like(av)
            np.add.at(out, rows, g)
            return out

        return Node(av[rows], (a,), (vjp,))
    cols = np.asarray(cols, dtype=np.intp)
    if av.ndim != 2 or rows.shape != cols.shape:
        raise _shape_error("select(rows, cols)", av.shape, rows.shape, cols.shape)

    def vjp2(g):
        out = np.zeros_like(av)
        np.add.at(out, (rows, cols), g)
        return out

    return Node(av[rows, cols], (a,), (vjp2,))


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return Node(y, (a,), (lambda g: g * (1.0 - y * y),))


def softplus(a: Node) -> Node:
    x = a.value
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))
    return Node(y, (a,), (lambda g: g * sig,))


def _as_rows(x: Array) -> Array:
    return x.reshape(1, -1) if x.ndim == 1 else x


def log_softmax(a: Node) -> Node:
    """Row-wise log softmax with max subtraction; tolerates -inf logits."""
    x = _as_rows(a.value)
    if x.ndim != 2:
        raise _shape_error("log_softmax", a.value.shape)
    m = np.max(x, axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        shifted = np.where(np.isneginf(m), -np.inf, x - m)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    y = (shifted - lse).reshape(a.value.shape)
    p = np.exp(y).reshape(x.shape)

    def vjp(g):
        gr = _as_rows(g)
        return (gr - p * gr.sum(axis=1, keepdims=True)).reshape(a.value.shape)

    return Node(y, (a,), (vjp,))


def softmax(a: Node) -> Node:
    x = _as_rows(a.value)
    if x.ndim != 2:
        raise _shape_error("softmax", a.value.shape)
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=1, keepdims=True)
    y = p.reshape(a.value.shape)

    def vjp(g):
        gr = _as_rows(g)
        return (p * (gr - (gr * p).sum(axis=1, keepdims=True))).reshape(a.value.shape)

    return Node(y, (a,), (vjp,))


def sum_(a: Node, axis: int | None = None) -> Node:
    av = a.value
    if axis is None:
        return Node(np.sum(av), (a,), (lambda g: np.full_like(av, float(g)),))
    if av.ndim != 2 or axis not in (0, 1):
        raise _shape_error("sum axis", av.shape)
    y = av.sum(axis=axis)

    def vjp(g):
        return np.repeat(np.expand_dims(g, axis), av.shape[axis], axis=axis)

    return Node(y, (a,), (vjp,))


def mean(a: Node) -> Node:
    n = a.value.size
    return Node(np.mean(a.value), (a,), (lambda g: np.full_like(a.value, float(g) / n),))


def backward(root: Node) -> None:
    """Reverse accumulation from a scalar root; grads land on every node."""
    if root.value.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
    topo: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node.grad is None or not node.parents:
            continue
        for parent, vjp in zip(node.parents, node._vjps):
            g = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + g


def grad_check(f: Callable[[list[Node]], Node], params: list[Array], eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    f maps a list of leaf Nodes (same shapes as params) to a scalar Node.
    Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    leaves = [leaf(p) for p in params]
    out = f(leaves)
    backward(out)
    analytic = [
        l.grad.copy() if l.grad is not None else np.zeros_like(l.value) for l in leaves
    ]
    max_rel = 0.0
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        aflat = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f([leaf(q) for q in params]).value)
            flat[i] = orig - eps
            fm = float(f([leaf(q) for q in params]).value)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            rel = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
            max_rel = max(max_rel, rel)
    return max_rel
