"""Radial grid topology: nodes, oriented lines and GMD placement."""

from __future__ import annotations

import enum
import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping


class TopologyError(ValueError):
    pass


class CycleDetected(TopologyError):
    pass


class DisconnectedGraph(TopologyError):
    pass


class DuplicateNode(TopologyError):
    pass


class UnknownNodeReference(TopologyError):
    pass


class RootHasParent(TopologyError):
    pass


class Phase(str, enum.Enum):
    A = "A"
    B = "B"
    C = "C"


PHASES = (Phase.A, Phase.B, Phase.C)


@dataclass(frozen=True)
class Line:
    """A line oriented so that power flows from ``parent`` to ``child``."""

    parent: str
    child: str
    line_id: str

    def __post_init__(self):
        if self.parent == self.child:
            raise CycleDetected(f"line {self.line_id!r} connects {self.parent!r} to itself")


@dataclass(frozen=True)
class GridTopology:
    """Validated radial network rooted at ``root``.

    Build instances with :func:`build_topology`; the constructor does not
    re-check radiality.
    """

    nodes: frozenset
    lines: tuple
    root: str
    measured_nodes: frozenset
    _parent_line: Mapping[str, Line] = field(repr=False, compare=False)
    _children: Mapping[str, tuple] = field(repr=False, compare=False)
    _depth: Mapping[str, int] = field(repr=False, compare=False)

    @property
    def unmeasured_nodes(self) -> frozenset:
        return self.nodes - self.measured_nodes

    def is_measured(self, node: str) -> bool:
        return node in self.measured_nodes

    def parent_line(self, node: str) -> Line | None:
        self._check(node)
        return self._parent_line.get(node)

    def parent(self, node: str) -> str | None:
        line = self.parent_line(node)
        return None if line is None else line.parent

    def depth(self, node: str) -> int:
        self._check(node)
        return self._depth[node]

    def line(self, line_id: str) -> Line:
        for ln in self.lines:
            if ln.line_id == line_id:
                return ln
        raise KeyError(line_id)

    def with_measured(self, measured: Iterable[str]) -> "GridTopology":
        """Same grid, different sensor placement."""
        return build_topology(sorted(self.nodes), list(self.lines), self.root, set(measured))

    def _check(self, node: str):
        if node not in self.nodes:
            raise UnknownNodeReference(node)


def build_topology(nodes, lines, root, measured, *, strict_orientation=False) -> GridTopology:
    """Validate a radial graph and orient every line away from ``root``.

    Input line direction is not trusted: orientation is recomputed by a BFS
    from the root. With ``strict_orientation`` a line listing the root as its
    receiving end raises :class:`RootHasParent` instead of being flipped.
    """
    nodes = list(nodes)
    lines = list(lines)
    if not nodes:
        raise TopologyError("topology has no nodes")
    node_set = set()
    for n in nodes:
        if n in node_set:
            raise DuplicateNode(n)
        node_set.add(n)
    if root not in node_set:
        raise UnknownNodeReference(f"root {root!r} is not a node")
    measured = set(measured)
    unknown = measured - node_set
    if unknown:
        raise UnknownNodeReference(f"measured nodes not in topology: {sorted(unknown)}")

    # union-find catches cycles as soon as an edge closes one
    uf = {n: n for n in node_set}

    def find(x):
        while uf[x] != x:
            uf[x] = uf[uf[x]]
            x = uf[x]
        return x

    adjacency: dict[str, list[Line]] = {n: [] for n in node_set}
    seen_ids = set()
    for ln in lines:
        for end in (ln.parent, ln.child):
            if end not in node_set:
                raise UnknownNodeReference(f"line {ln.line_id!r} references {end!r}")
        if ln.line_id in seen_ids:
            raise TopologyError(f"duplicate line id {ln.line_id!r}")
        seen_ids.add(ln.line_id)
        if strict_orientation and ln.child == root:
            raise RootHasParent(f"line {ln.line_id!r} feeds the root {root!r}")
        a, b = find(ln.parent), find(ln.child)
        if a == b:
            raise CycleDetected(f"line {ln.line_id!r} closes a cycle")
        uf[a] = b
        adjacency[ln.parent].append(ln)
        adjacency[ln.child].append(ln)

    if len(lines) != len(node_set) - 1:
        raise DisconnectedGraph(f"{len(node_set)} nodes but only {len(lines)} lines")

    parent_line: dict[str, Line] = {}
    depth = {root: 0}
    children: dict[str, list[str]] = {n: [] for n in node_set}
    oriented = []
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for ln in sorted(adjacency[u], key=lambda x: x.line_id):
            v = ln.child if ln.parent == u else ln.parent
            if v in depth:
                continue
            fixed = ln if ln.parent == u else Line(u, v, ln.line_id)
            depth[v] = depth[u] + 1
            parent_line[v] = fixed
            children[u].append(v)
            oriented.append(fixed)
            queue.append(v)
    if len(depth) != len(node_set):
        raise DisconnectedGraph("not every node is reachable from the root")

    order = {ln.line_id: k for k, ln in enumerate(lines)}
    oriented.sort(key=lambda ln: order[ln.line_id])
    return GridTopology(
        nodes=frozenset(node_set),
        lines=tuple(oriented),
        root=root,
        measured_nodes=frozenset(measured),
        _parent_line=parent_line,
        _children={k: tuple(sorted(v)) for k, v in children.items()},
        _depth=depth,
    )


def children(t: GridTopology, n: str) -> set:
    t._check(n)
    return set(t._children[n])


def bottom_up_order(t: GridTopology, subset) -> list:
    """Deepest nodes first; ties broken by ascending node id."""
    subset = set(subset)
    for n in subset:
        t._check(n)
    return sorted(subset, key=lambda n: (-t._depth[n], n))


def path_to_root(t: GridTopology, n: str) -> list:
    out = [n]
    while (p := t.parent(out[-1])) is not None:
        out.append(p)
    return out


# -- topology file -----------------------------------------------------------

_TOPOLOGY_KEYS = {"root", "nodes", "lines", "measured"}
_LINE_KEYS = {"id", "from", "to"}


def topology_from_dict(doc: dict) -> GridTopology:
    extra = set(doc) - _TOPOLOGY_KEYS
    if extra:
        warnings.warn(f"ignoring unknown topology fields: {sorted(extra)}", stacklevel=2)
    missing = {"root", "nodes", "lines"} - set(doc)
    if missing:
        raise TopologyError(f"topology document lacks {sorted(missing)}")
    lines = []
    for entry in doc["lines"]:
        extra = set(entry) - _LINE_KEYS
        if extra:
            warnings.warn(f"ignoring unknown line fields: {sorted(extra)}", stacklevel=2)
        lines.append(Line(str(entry["from"]), str(entry["to"]), str(entry["id"])))
    return build_topology(
        [str(n) for n in doc["nodes"]],
        lines,
        str(doc["root"]),
        {str(n) for n in doc.get("measured", [])},
    )


def topology_to_dict(t: GridTopology) -> dict:
    return {
        "root": t.root,
        "nodes": sorted(t.nodes),
        "lines": [{"id": ln.line_id, "from": ln.parent, "to": ln.child} for ln in t.lines],
        "measured": sorted(t.measured_nodes),
    }


def load_topology(path) -> GridTopology:
    with open(path, encoding="utf-8") as fh:
        return topology_from_dict(json.load(fh))


def save_topology(t: GridTopology, path):
    Path(path).write_text(json.dumps(topology_to_dict(t), indent=2) + "\n", encoding="utf-8")
