"""Typed expression graphs over user/item embeddings.

A candidate similarity metric is a tree whose leaves are the user embedding
`u`, the item embedding `v`, or the all-ones vector, and whose internal nodes
are vector operators.  Every operator consumes vectors only, so a scalar can
appear in exactly one place: the root.  The operator space:

    binary, vector -> vector : add, sub, had (elementwise product), proj
    binary, vector -> scalar : dot, cos, l1d, l2d
    unary,  vector -> vector : norm, smul (attached constant), neg
    unary,  vector -> scalar : l1n, l2n, sum

`sum` (elementwise sum to a scalar) extends the base operator set; without it
several useful scalar-rooted metrics are inexpressible.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError


class Kind(enum.Enum):
    SCALAR = "scalar"
    VECTOR = "vector"


class Op(enum.Enum):
    ADD = "add"
    SUB = "sub"
    DOT = "dot"
    COS = "cos"
    HAD = "had"
    L1D = "l1d"
    L2D = "l2d"
    PROJ = "proj"
    L1N = "l1n"
    L2N = "l2n"
    NORM = "norm"
    SMUL = "smul"
    NEG = "neg"
    SUM = "sum"


class Leaf(enum.Enum):
    USER = "u"
    ITEM = "v"
    ONES = "ones"


ARITY = {
    Op.ADD: 2, Op.SUB: 2, Op.DOT: 2, Op.COS: 2, Op.HAD: 2,
    Op.L1D: 2, Op.L2D: 2, Op.PROJ: 2,
    Op.L1N: 1, Op.L2N: 1, Op.NORM: 1, Op.SMUL: 1, Op.NEG: 1, Op.SUM: 1,
}

OUTPUT_KIND = {
    Op.ADD: Kind.VECTOR, Op.SUB: Kind.VECTOR, Op.HAD: Kind.VECTOR,
    Op.PROJ: Kind.VECTOR, Op.NORM: Kind.VECTOR, Op.SMUL: Kind.VECTOR,
    Op.NEG: Kind.VECTOR,
    Op.DOT: Kind.SCALAR, Op.COS: Kind.SCALAR, Op.L1D: Kind.SCALAR,
    Op.L2D: Kind.SCALAR, Op.L1N: Kind.SCALAR, Op.L2N: Kind.SCALAR,
    Op.SUM: Kind.SCALAR,
}

# Sampling pools in fixed declaration order so seeded draws are reproducible.
SCALAR_OPS = tuple(op for op in Op if OUTPUT_KIND[op] is Kind.SCALAR)
VECTOR_OPS = tuple(op for op in Op if OUTPUT_KIND[op] is Kind.VECTOR)
ALL_LEAVES = (Leaf.USER, Leaf.ITEM, Leaf.ONES)


@dataclass(frozen=True)
class Node:
    """One tree node: either an operator (with children) or a leaf.

    Immutable; subtrees may be shared freely between graphs.
    """

    op: Op | None = None
    leaf: Leaf | None = None
    constant: float | None = None  # attached c, SMUL only
    children: tuple["Node", ...] = ()

    @property
    def is_leaf(self) -> bool:
        return self.leaf is not None

    @property
    def kind(self) -> Kind:
        return Kind.VECTOR if self.is_leaf else OUTPUT_KIND[self.op]


def op_node(op: Op, *children: Node, constant: float | None = None) -> Node:
    if op is Op.SMUL and constant is None:
        raise ValueError("smul node requires a constant")
    return Node(op=op, constant=constant, children=tuple(children))


def leaf_node(leaf: Leaf) -> Node:
    return Node(leaf=leaf)


@dataclass(frozen=True)
class MetricGraph:
    """A candidate similarity metric: scalar-rooted typed expression tree.

    `max_depth` is the depth budget the tree was built under (root depth 0);
    mutations must keep every node within it.
    """

    root: Node
    max_depth: int

    @property
    def depth(self) -> int:
        return max(d for _, d, _ in iter_nodes(self))

    @property
    def n_nodes(self) -> int:
        return sum(1 for _ in iter_nodes(self))

    def leaves(self) -> list[Leaf]:
        """Leaf kinds in pre-order (generation draw order)."""
        return [n.leaf for _, _, n in iter_nodes(self) if n.is_leaf]

    def same_structure(self, other: "MetricGraph") -> bool:
        """Node-for-node tree equality, ignoring the depth budget."""
        return self.root == other.root


def iter_nodes(graph: MetricGraph):
    """Yield (pre_order_index, depth, node) over the tree."""
    stack = [(graph.root, 0)]
    index = 0
    while stack:
        node, depth = stack.pop()
        yield index, depth, node
        index += 1
        stack.extend((child, depth + 1) for child in reversed(node.children))


def node_paths(root: Node) -> list[tuple[tuple[int, ...], int, Node]]:
    """Pre-order list of (child-index path from root, depth, node)."""
    out = []

    def rec(node, path, depth):
        out.append((path, depth, node))
        for i, child in enumerate(node.children):
            rec(child, path + (i,), depth + 1)

    rec(root, (), 0)
    return out


def replace_path(root: Node, path: tuple[int, ...], new: Node) -> Node:
    """Return a tree with the node at `path` swapped for `new` (shares the rest)."""
    if not path:
        return new
    kids = list(root.children)
    kids[path[0]] = replace_path(kids[path[0]], path[1:], new)
    return replace(root, children=tuple(kids))


@dataclass(frozen=True)
class Violation:
    """First structural invariant a graph breaks, and where."""

    rule: str
    node_index: int
    message: str

    def __str__(self):
        return f"{self.rule} violated at node {self.node_index}: {self.message}"


def validate(graph: MetricGraph) -> Violation | None:
    """Check all structural invariants; None means the graph is valid.

    Checks, in order: scalar root; per-node arity, child kinds and smul
    constants (pre-order); leaf coverage (at least one u and one v); depth
    budget.  The first failure is reported.
    """
    nodes = list(iter_nodes(graph))
    if nodes[0][2].kind is not Kind.SCALAR:
        return Violation("scalar-root", 0, "root must produce a scalar similarity score")
    for index, _, node in nodes:
        if node.is_leaf:
            continue
        want = ARITY[node.op]
        if len(node.children) != want:
            return Violation("arity", index,
                             f"{node.op.value} takes {want} children, has {len(node.children)}")
        for child in node.children:
            if child.kind is not Kind.VECTOR:
                return Violation("input-kind", index,
                                 f"{node.op.value} consumes vectors, got a scalar child")
        if node.op is Op.SMUL and (node.constant is None or not math.isfinite(node.constant)):
            return Violation("smul-constant", index, "smul requires a finite attached constant")
    kinds = {node.leaf for _, _, node in nodes if node.is_leaf}
    if Leaf.USER not in kinds:
        return Violation("leaf-coverage", 0, "no user-embedding leaf in the tree")
    if Leaf.ITEM not in kinds:
        return Violation("leaf-coverage", 0, "no item-embedding leaf in the tree")
    for index, depth, _ in nodes:
        if depth > graph.max_depth:
            return Violation("depth", index,
                             f"node at depth {depth} exceeds budget {graph.max_depth}")
    return None


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs for random metric generation.

    `constant_pool` supplies the frozen constants attached to smul nodes;
    zero is rejected because c=0 collapses its subtree to the zero vector.
    """

    max_depth: int = 3
    constant_pool: tuple[float, ...] = (-1.0, 0.5, 2.0)
    seed: int = 0

    def check(self):
        if self.max_depth < 1:
            raise ConfigError("max_depth must be >= 1 (dot(u,v) needs depth 1)")
        if not self.constant_pool:
            raise ConfigError("constant_pool must not be empty")
        if any(c == 0 for c in self.constant_pool):
            raise ConfigError("constant_pool must not contain zero")
        if any(not math.isfinite(c) for c in self.constant_pool):
            raise ConfigError("constant_pool entries must be finite")


class _LeafPool:
    """Without-replacement sampler over {u, v, ones}.

    Draws remove entries; the pool refills only once both u and v have been
    drawn since the last refill.
    """

    def __init__(self, rng):
        self._rng = rng
        self._refill()

    def _refill(self):
        self._avail = list(ALL_LEAVES)
        self._drawn = set()

    def draw(self) -> Leaf:
        pick = self._avail.pop(int(self._rng.integers(len(self._avail))))
        self._drawn.add(pick)
        if Leaf.USER in self._drawn and Leaf.ITEM in self._drawn:
            self._refill()
        return pick


def random_generate(config: GenerationConfig, rng=None) -> MetricGraph:
    """Sample a valid metric graph.

    The root is drawn from the scalar-output operators, interior layers from
    the vector-output operators, and leaves (all at depth `max_depth`) from
    the without-replacement pool.  Trees whose leaf draw misses u or v are
    rejected and regenerated, so the result always validates.
    """
    config.check()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    while True:
        pool = _LeafPool(rng)

        def grow(depth):
            if depth == config.max_depth:
                return leaf_node(pool.draw())
            ops = SCALAR_OPS if depth == 0 else VECTOR_OPS
            op = ops[int(rng.integers(len(ops)))]
            constant = None
            if op is Op.SMUL:
                constant = float(config.constant_pool[int(rng.integers(len(config.constant_pool)))])
            children = tuple(grow(depth + 1) for _ in range(ARITY[op]))
            return op_node(op, *children, constant=constant)

        graph = MetricGraph(root=grow(0), max_depth=config.max_depth)
        if validate(graph) is None:
            return graph
