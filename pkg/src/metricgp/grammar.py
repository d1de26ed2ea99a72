"""Textual expression grammar for metric graphs.

Function-call syntax, one name per operator: `add`, `sub`, `dot`, `cos`,
`had`, `l1d`, `l2d`, `proj` (projects its second argument onto its first),
`l1n`, `l2n`, `norm`, `smul(c, x)` with c a decimal literal, `neg`, `sum`;
leaves `u`, `v`, `ones`.  Whitespace between tokens is ignored.  This is the
on-disk and command-line interchange format for metrics.
"""

from __future__ import annotations

import re

from .errors import ParseError, ValidationError
from .graph import ARITY, Leaf, MetricGraph, Node, Op, leaf_node, node_paths, op_node, validate

_LEAF_NAMES = {leaf.value: leaf for leaf in Leaf}
_OP_NAMES = {op.value: op for op in Op}

_NUMBER_RE = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?")
_NAME_RE = re.compile(r"[a-z][a-z0-9]*")


def format_constant(c: float) -> str:
    """Shortest decimal literal that round-trips: 2.0 -> "2", 0.5 -> "0.5"."""
    c = float(c)
    if c.is_integer():
        return str(int(c))
    return repr(c)


def print_expr(graph: MetricGraph) -> str:
    """Deterministic textual form of a graph; inverse of `parse_expr`."""
    return _fmt(graph.root)


def _fmt(node: Node) -> str:
    if node.is_leaf:
        return node.leaf.value
    if node.op is Op.SMUL:
        return f"smul({format_constant(node.constant)},{_fmt(node.children[0])})"
    args = ",".join(_fmt(c) for c in node.children)
    return f"{node.op.value}({args})"


class _Cursor:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def byte_offset(self) -> int:
        return len(self.text[: self.pos].encode("utf-8"))

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)

    def expect(self, ch: str):
        self.skip_ws()
        if self.pos < len(self.text) and self.text[self.pos] == ch:
            self.pos += 1
            return
        raise ParseError("unexpected input", self.byte_offset(), expected=(repr(ch),))

    def match_re(self, pattern):
        self.skip_ws()
        m = pattern.match(self.text, self.pos)
        if m:
            self.pos = m.end()
        return m


def _parse_number(cur: _Cursor) -> float:
    m = cur.match_re(_NUMBER_RE)
    if not m:
        raise ParseError("expected a decimal constant", cur.byte_offset(),
                         expected=("decimal literal",))
    return float(m.group(0))


def _parse_expr(cur: _Cursor) -> Node:
    m = cur.match_re(_NAME_RE)
    if not m:
        raise ParseError("expected an expression", cur.byte_offset(),
                         expected=("operator name", "u", "v", "ones"))
    name = m.group(0)
    if name in _LEAF_NAMES:
        return leaf_node(_LEAF_NAMES[name])
    if name not in _OP_NAMES:
        raise ParseError(f"unknown operator '{name}'",
                         len(cur.text[: m.start()].encode("utf-8")),
                         expected=tuple(sorted(_OP_NAMES)) + tuple(sorted(_LEAF_NAMES)))
    op = _OP_NAMES[name]
    cur.expect("(")
    constant = None
    if op is Op.SMUL:
        constant = _parse_number(cur)
        cur.expect(",")
    children = [_parse_expr(cur)]
    for _ in range(ARITY[op] - 1 if op is not Op.SMUL else 0):
        cur.expect(",")
        children.append(_parse_expr(cur))
    cur.expect(")")
    return op_node(op, *children, constant=constant)


def parse_expr(text: str, max_depth: int | None = None) -> MetricGraph:
    """Parse expression text into a validated MetricGraph.

    The depth budget defaults to the parsed tree's own depth.  Raises
    `ParseError` on malformed text and `ValidationError` when the tree
    breaks a structural invariant (wrong root kind, missing u/v leaf, ...).
    """
    cur = _Cursor(text)
    root = _parse_expr(cur)
    if not cur.at_end():
        raise ParseError("trailing input after expression", cur.byte_offset(),
                         expected=("end of input",))
    depth = max(d for _, d, _ in node_paths(root))
    graph = MetricGraph(root=root, max_depth=max_depth if max_depth is not None else max(depth, 1))
    violation = validate(graph)
    if violation is not None:
        raise ValidationError(violation)
    return graph
