"""Forward evaluation and reverse-mode gradients for metric graphs.

Everything runs batched on float64 arrays: a row pair (U[k], V[k]) yields one
similarity score.  The single-pair `forward`/`backward` wrap the batch path
with n=1, so batch and per-row results are bitwise identical.

Every denominator (norms, cosine, projection, and their derivative
counterparts) is clamped from below at the workspace epsilon, so zero
embeddings evaluate without NaNs.  L1 terms use the subgradient convention
sign(0) = 0.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatchError, NonFiniteError
from .graph import Leaf, MetricGraph, Node, Op


class Workspace:
    """Per-caller scratch for one forward (and optional backward) pass.

    Holds the per-node forward values and adjoints in pre-order, the batch
    inputs, and the singularity guard epsilon.  Reusable across calls; each
    forward pass resets it.
    """

    def __init__(self, epsilon: float = 1e-12):
        if not epsilon > 0:
            raise ValueError("epsilon must be positive")
        self.epsilon = float(epsilon)
        self.graph = None
        self.users = None
        self.items = None
        self.values: list[np.ndarray] = []
        self.adjoints: list[np.ndarray | None] = []
        self.tape: list[tuple[Node, int, tuple[int, ...]]] = []

    @property
    def dim(self) -> int:
        return 0 if self.users is None else self.users.shape[1]

    def node_values(self) -> list[np.ndarray]:
        """Per-node forward values in pre-order (for inspection/tests)."""
        return list(self.values)


def _as_batch(arr, name):
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionMismatchError(f"{name} must be a vector or an n x d matrix")
    return a


def _guard(x, eps):
    return np.maximum(x, eps)


def forward_batch(graph: MetricGraph, users, items, ws: Workspace | None = None,
                  *, epsilon: float = 1e-12, check: bool = True) -> np.ndarray:
    """Score every row pair; returns an (n,) array.

    Raises DimensionMismatchError on shape disagreement and, when `check`
    is set, NonFiniteError if any intermediate is NaN or infinite.
    """
    if ws is None:
        ws = Workspace(epsilon)
    U = _as_batch(users, "users")
    V = _as_batch(items, "items")
    if U.shape != V.shape:
        raise DimensionMismatchError(f"user rows {U.shape} != item rows {V.shape}")
    ws.graph = graph
    ws.users = U
    ws.items = V
    ws.values = []
    ws.adjoints = []
    ws.tape = []
    eps = ws.epsilon
    n, d = U.shape
    values = ws.values

    def rec(node: Node) -> int:
        index = len(values)
        values.append(None)
        if node.is_leaf:
            child_idx = ()
            if node.leaf is Leaf.USER:
                val = U
            elif node.leaf is Leaf.ITEM:
                val = V
            else:
                val = np.ones((n, d))
        else:
            child_idx = tuple(rec(c) for c in node.children)
            with np.errstate(all="ignore"):
                val = _apply(node, [values[i] for i in child_idx], eps)
        if check and not np.all(np.isfinite(val)):
            raise NonFiniteError(
                f"non-finite value at node {index} ({_node_name(node)})", index)
        values[index] = val
        ws.tape.append((node, index, child_idx))
        return index

    rec(graph.root)
    return values[0]


def _node_name(node):
    return node.leaf.value if node.is_leaf else node.op.value


def _apply(node: Node, kids, eps):
    op = node.op
    if op is Op.ADD:
        return kids[0] + kids[1]
    if op is Op.SUB:
        return kids[0] - kids[1]
    if op is Op.HAD:
        return kids[0] * kids[1]
    if op is Op.NEG:
        return -kids[0]
    if op is Op.SMUL:
        return node.constant * kids[0]
    if op is Op.DOT:
        return np.einsum("ij,ij->i", kids[0], kids[1])
    if op is Op.SUM:
        return kids[0].sum(axis=1)
    if op is Op.L1N:
        return np.abs(kids[0]).sum(axis=1)
    if op is Op.L2N:
        return np.sqrt(np.square(kids[0]).sum(axis=1))
    if op is Op.L1D:
        return np.abs(kids[0] - kids[1]).sum(axis=1)
    if op is Op.L2D:
        return np.sqrt(np.square(kids[0] - kids[1]).sum(axis=1))
    if op is Op.NORM:
        nx = np.sqrt(np.square(kids[0]).sum(axis=1))
        return kids[0] / _guard(nx, eps)[:, None]
    if op is Op.COS:
        nx = np.sqrt(np.square(kids[0]).sum(axis=1))
        ny = np.sqrt(np.square(kids[1]).sum(axis=1))
        return np.einsum("ij,ij->i", kids[0], kids[1]) / _guard(nx * ny, eps)
    if op is Op.PROJ:
        # proj(a, b): ((a.b) / ||a||) * a, the divisor taken once as printed.
        s = np.einsum("ij,ij->i", kids[0], kids[1])
        nx = np.sqrt(np.square(kids[0]).sum(axis=1))
        return (s / _guard(nx, eps))[:, None] * kids[0]
    raise AssertionError(f"unhandled operator {op}")


def backward_batch(ws: Workspace, seed=None, *, check: bool = True):
    """Accumulate d(score)/dU and d(score)/dV from a completed forward pass.

    `seed` scales each row's output adjoint (default ones); used by the
    trainer to push loss coefficients through in one pass.  Returns
    (grad_users, grad_items), each shaped like the forward inputs.
    """
    if ws.graph is None or not ws.tape:
        raise ValueError("backward requires a completed forward pass in this workspace")
    U, V = ws.users, ws.items
    n, d = U.shape
    eps = ws.epsilon
    values = ws.values
    adj = [None] * len(values)
    root_index = ws.tape[-1][1]
    if seed is None:
        adj[root_index] = np.ones(n)
    else:
        adj[root_index] = np.asarray(seed, dtype=np.float64).reshape(n).copy()
    grad_u = np.zeros((n, d))
    grad_v = np.zeros((n, d))

    def bump(index, delta):
        if adj[index] is None:
            adj[index] = delta.copy() if isinstance(delta, np.ndarray) else delta
        else:
            adj[index] = adj[index] + delta

    with np.errstate(all="ignore"):
        for node, index, child_idx in reversed(ws.tape):
            g = adj[index]
            if g is None:
                continue
            if check and not np.all(np.isfinite(g)):
                raise NonFiniteError(
                    f"non-finite adjoint at node {index} ({_node_name(node)})", index)
            if node.is_leaf:
                if node.leaf is Leaf.USER:
                    grad_u += g
                elif node.leaf is Leaf.ITEM:
                    grad_v += g
                continue
            kids = [values[i] for i in child_idx]
            op = node.op
            if op is Op.ADD:
                bump(child_idx[0], g)
                bump(child_idx[1], g)
            elif op is Op.SUB:
                bump(child_idx[0], g)
                bump(child_idx[1], -g)
            elif op is Op.HAD:
                bump(child_idx[0], g * kids[1])
                bump(child_idx[1], g * kids[0])
            elif op is Op.NEG:
                bump(child_idx[0], -g)
            elif op is Op.SMUL:
                bump(child_idx[0], node.constant * g)
            elif op is Op.DOT:
                bump(child_idx[0], g[:, None] * kids[1])
                bump(child_idx[1], g[:, None] * kids[0])
            elif op is Op.SUM:
                bump(child_idx[0], np.repeat(g[:, None], d, axis=1))
            elif op is Op.L1N:
                bump(child_idx[0], g[:, None] * np.sign(kids[0]))
            elif op is Op.L2N:
                bump(child_idx[0], (g / _guard(values[index], eps))[:, None] * kids[0])
            elif op is Op.L1D:
                s = np.sign(kids[0] - kids[1])
                bump(child_idx[0], g[:, None] * s)
                bump(child_idx[1], -g[:, None] * s)
            elif op is Op.L2D:
                r = kids[0] - kids[1]
                scaled = (g / _guard(values[index], eps))[:, None] * r
                bump(child_idx[0], scaled)
                bump(child_idx[1], -scaled)
            elif op is Op.NORM:
                x = kids[0]
                nx = np.sqrt(np.square(x).sum(axis=1))
                gx = g / _guard(nx, eps)[:, None]
                w = np.einsum("ij,ij->i", g, x)
                gx -= (w / _guard(nx ** 3, eps))[:, None] * x
                bump(child_idx[0], gx)
            elif op is Op.COS:
                x, y = kids
                nx = np.sqrt(np.square(x).sum(axis=1))
                ny = np.sqrt(np.square(y).sum(axis=1))
                denom = _guard(nx * ny, eps)
                c = values[index]
                bump(child_idx[0],
                     g[:, None] * (y / denom[:, None] - (c / _guard(nx ** 2, eps))[:, None] * x))
                bump(child_idx[1],
                     g[:, None] * (x / denom[:, None] - (c / _guard(ny ** 2, eps))[:, None] * y))
            elif op is Op.PROJ:
                x, y = kids
                s = np.einsum("ij,ij->i", x, y)
                nx = np.sqrt(np.square(x).sum(axis=1))
                n1 = _guard(nx, eps)
                coef = s / n1
                w = np.einsum("ij,ij->i", g, x)
                bump(child_idx[1], (w / n1)[:, None] * x)
                gx = coef[:, None] * g
                gx += w[:, None] * (y / n1[:, None] - (s / _guard(nx ** 3, eps))[:, None] * x)
                bump(child_idx[0], gx)
            else:
                raise AssertionError(f"unhandled operator {op}")

    if check and not (np.all(np.isfinite(grad_u)) and np.all(np.isfinite(grad_v))):
        raise NonFiniteError("non-finite gradient at the inputs")
    ws.adjoints = adj
    return grad_u, grad_v


def forward(graph: MetricGraph, u, v, ws: Workspace | None = None,
            *, epsilon: float = 1e-12) -> float:
    """Similarity score for one (u, v) pair."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise DimensionMismatchError(f"expected equal-length vectors, got {u.shape} and {v.shape}")
    out = forward_batch(graph, u[None, :], v[None, :], ws, epsilon=epsilon)
    return float(out[0])


def backward(graph: MetricGraph, u, v, ws: Workspace):
    """Gradients (d score/du, d score/dv) for the pair last run through `forward`."""
    if ws is None or ws.graph is not graph:
        raise ValueError("workspace does not hold a forward pass of this graph")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not (np.array_equal(ws.users[0], u) and np.array_equal(ws.items[0], v)):
        raise ValueError("workspace holds a forward pass for different inputs")
    gu, gv = backward_batch(ws)
    return gu[0], gv[0]
