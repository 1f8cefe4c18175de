"""Topology of the d-dimensional k-ary butterfly.

Nodes are ``(level, column)`` with levels 0..d and columns 0..k^d - 1.
Server ``j`` emulates the whole column ``j``, one node per level.

Digit convention.  Column digits are base-k, indexed from the least
significant digit.  An edge between level ``l`` and level ``l+1`` varies
digit ``l`` and nothing else, so the sub-butterfly of a node at level
``l`` is the set of columns that agree with it on every digit at or above
``l`` (a contiguous range of k^l columns).  The alternative convention
(varying the most significant digit first) would mirror every column
string; the one used here keeps a level-l sub-butterfly aligned with a
fixed high-order digit prefix, which is what probe routing relies on.
"""

from __future__ import annotations

from dataclasses import dataclass


class TopologyError(ValueError):
    """Invalid node coordinates or topology parameters."""


@dataclass(frozen=True, order=True)
class NodeId:
    """Address of a butterfly node: level 0..d, column 0..k^d - 1."""

    level: int
    column: int


class Topology:
    """A k-ary butterfly with n = k^d columns."""

    def __init__(self, k: int, d: int):
        if k < 2 or d < 1:
            raise TopologyError("need k >= 2 and d >= 1, got k=%d d=%d" % (k, d))
        self.k = k
        self.d = d
        self.n = k**d
        self._pow = [k**i for i in range(d + 1)]

    # -- column digit helpers -------------------------------------------------

    def digit(self, column: int, j: int) -> int:
        """Base-k digit ``j`` of a column, least significant digit first."""
        return (column // self._pow[j]) % self.k

    def with_digit(self, column: int, j: int, value: int) -> int:
        return column + (value - self.digit(column, j)) * self._pow[j]

    def column_str(self, column: int) -> str:
        """Column as a d-digit base-k string, most significant digit first."""
        return "".join(str(self.digit(column, j)) for j in range(self.d - 1, -1, -1))

    def column_from_str(self, s: str) -> int:
        if len(s) != self.d:
            raise TopologyError("column string must have %d digits" % self.d)
        return int(s, self.k) if self.k <= 10 else sum(
            int(ch) * self._pow[self.d - 1 - i] for i, ch in enumerate(s)
        )

    def check_node(self, node: NodeId) -> None:
        if not (0 <= node.level <= self.d):
            raise TopologyError("level %d out of range 0..%d" % (node.level, self.d))
        if not (0 <= node.column < self.n):
            raise TopologyError("column %d out of range" % node.column)

    # -- neighborhoods --------------------------------------------------------

    def group_members(self, column: int, digit_pos: int) -> list[int]:
        """The k columns that differ from ``column`` only in one digit."""
        base = column - self.digit(column, digit_pos) * self._pow[digit_pos]
        return [base + b * self._pow[digit_pos] for b in range(self.k)]

    def down_neighbors(self, node: NodeId) -> list[NodeId]:
        self.check_node(node)
        if node.level >= self.d:
            raise TopologyError("level-%d node has no down neighbors" % node.level)
        return [
            NodeId(node.level + 1, c)
            for c in self.group_members(node.column, node.level)
        ]

    def up_neighbors(self, node: NodeId) -> list[NodeId]:
        self.check_node(node)
        if node.level <= 0:
            raise TopologyError("level-0 node has no up neighbors")
        return [
            NodeId(node.level - 1, c)
            for c in self.group_members(node.column, node.level - 1)
        ]

    def neighbors(self, node: NodeId, direction: str) -> list[NodeId]:
        if direction == "down":
            return self.down_neighbors(node)
        if direction == "up":
            return self.up_neighbors(node)
        raise TopologyError("direction must be 'up' or 'down'")

    # -- sub-butterflies and trees --------------------------------------------

    def sub_butterfly_base(self, level: int, column: int) -> int:
        return column - column % self._pow[level]

    def sub_butterfly_columns(self, node: NodeId) -> range:
        """Columns of the dimension-``level`` sub-butterfly containing ``node``."""
        self.check_node(node)
        base = self.sub_butterfly_base(node.level, node.column)
        return range(base, base + self._pow[node.level])

    def upward_tree(self, node: NodeId) -> list[NodeId]:
        """All nodes reached from ``node`` by walking up to level 0 (BFS order)."""
        self.check_node(node)
        frontier = [node]
        out = [node]
        for level in range(node.level, 0, -1):
            nxt: list[NodeId] = []
            for u in frontier:
                nxt.extend(self.up_neighbors(u))
            frontier = nxt
            out.extend(nxt)
        return out

    def tree_children(self, node: NodeId) -> list[NodeId]:
        """Children of ``node`` in the downward tree rooted at its level-0
        ancestor that fixes low digits; used by the counting/selection walk."""
        return self.down_neighbors(node)

    # -- probe paths -----------------------------------------------------------

    def path_node(self, start_column: int, target_column: int, level: int) -> NodeId:
        """Node at ``level`` on the unique descent from (d, start) to (0, target).

        Walking from level l+1 to level l pins digit l to the target's, so at
        level l the column carries the target's digits at positions >= l and
        the start's digits below.
        """
        p = self._pow[level]
        return NodeId(level, target_column - target_column % p + start_column % p)

    def probe_path(self, start_column: int, target_column: int) -> list[NodeId]:
        """The d+1 nodes from (d, start) down to (0, target)."""
        return [
            self.path_node(start_column, target_column, level)
            for level in range(self.d, -1, -1)
        ]


def fit_dimension(k: int, n: int) -> int:
    """The d with k^d = n, or raise if n is not a power of k."""
    d = 0
    m = 1
    while m < n:
        m *= k
        d += 1
    if m != n:
        raise TopologyError("n=%d is not a power of k=%d" % (n, k))
    if d < 1:
        raise TopologyError("need at least k servers")
    return d
