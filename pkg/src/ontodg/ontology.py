"""Multilevel concept hierarchy (ICD-9-CM-like tree) and its code-to-leaf map.

Hierarchy file format, one item per line::

    parent_name>child_name      an edge
    #code <code_string> <leaf>  declares that a code maps to a leaf
    #node <name>                optional; reserves the next NodeId for <name>
    # anything else             comment

NodeIds are dense integers assigned in order of first appearance in the file.
"""

from __future__ import annotations

import logging
from collections import deque
from functools import cached_property
from pathlib import Path
from typing import Iterable

logger = logging.getLogger(__name__)


class HierarchyError(ValueError):
    pass


class HierarchyParseError(HierarchyError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class CycleError(HierarchyError):
    pass


class MultiRootError(HierarchyError):
    pass


class LevelError(HierarchyError):
    pass


class Hierarchy:
    """Immutable rooted tree with levels 1..H and a code -> leaf mapping.

    Build through :func:`build_hierarchy` or :func:`load_hierarchy`; the
    constructor assumes already-validated arrays.
    """

    def __init__(self, names: list[str], parent: list[int], leaf_map: dict[str, int]):
        self.names = list(names)
        self.parent = list(parent)
        self.leaf_map = dict(leaf_map)
        n = len(names)
        self.children: list[list[int]] = [[] for _ in range(n)]
        for c, p in enumerate(self.parent):
            if p >= 0:
                self.children[p].append(c)
        self.root = self.parent.index(-1)
        self.level = [0] * n
        self.level[self.root] = 1
        for node in self.bfs():
            for c in self.children[node]:
                self.level[c] = self.level[node] + 1
        self.H = max(self.level)
        self.index = {name: i for i, name in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Hierarchy):
            return NotImplemented
        return (
            self.names == other.names
            and self.parent == other.parent
            and self.leaf_map == other.leaf_map
        )

    def __repr__(self) -> str:
        return f"Hierarchy(nodes={len(self)}, H={self.H}, leaves={self.n_leaves})"

    def bfs(self) -> list[int]:
        order, queue = [], deque([self.root])
        while queue:
            node = queue.popleft()
            order.append(node)
            queue.extend(self.children[node])
        return order

    def _check(self, n: int) -> None:
        if not (isinstance(n, int) or hasattr(n, "__index__")) or not 0 <= n < len(self.names):
            raise KeyError(f"unknown NodeId {n!r}")

    def is_leaf(self, n: int) -> bool:
        self._check(n)
        return not self.children[n]

    @cached_property
    def leaves(self) -> list[int]:
        return [i for i in range(len(self)) if not self.children[i]]

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    @cached_property
    def leaf_position(self) -> dict[int, int]:
        """NodeId of a leaf -> its column in leaf-indexed arrays."""
        return {leaf: j for j, leaf in enumerate(self.leaves)}

    def nodes_at_level(self, level: int) -> list[int]:
        return [i for i in range(len(self)) if self.level[i] == level]

    @cached_property
    def _desc(self) -> list[frozenset]:
        out: list[frozenset] = [frozenset()] * len(self)
        for node in reversed(self.bfs()):
            acc = set()
            for c in self.children[node]:
                acc.add(c)
                acc |= out[c]
            out[node] = frozenset(acc)
        return out

    @cached_property
    def _leaf_desc(self) -> list[frozenset]:
        out: list[frozenset] = [frozenset()] * len(self)
        for node in reversed(self.bfs()):
            if not self.children[node]:
                out[node] = frozenset([node])
            else:
                acc = set()
                for c in self.children[node]:
                    acc |= out[c]
                out[node] = frozenset(acc)
        return out

    def descendants(self, n: int) -> frozenset:
        """All nodes strictly below ``n``."""
        self._check(n)
        return self._desc[n]

    def leaf_descendants(self, n: int) -> frozenset:
        """Leaves under ``n``; a leaf covers itself."""
        self._check(n)
        return self._leaf_desc[n]

    def ancestors(self, n: int) -> list[int]:
        """Path from ``n`` (inclusive) up to the root."""
        self._check(n)
        path = [n]
        while self.parent[path[-1]] >= 0:
            path.append(self.parent[path[-1]])
        return path

    def is_ancestor_or_self(self, a: int, b: int) -> bool:
        """True if ``a`` lies on the path from ``b`` to the root."""
        self._check(a)
        self._check(b)
        while b >= 0:
            if b == a:
                return True
            if self.level[b] <= self.level[a]:
                return False
            b = self.parent[b]
        return False

    def lca(self, a: int, b: int) -> int:
        self._check(a)
        self._check(b)
        while self.level[a] > self.level[b]:
            a = self.parent[a]
        while self.level[b] > self.level[a]:
            b = self.parent[b]
        while a != b:
            a, b = self.parent[a], self.parent[b]
        return a

    def leaf_of(self, code: str) -> int:
        try:
            return self.leaf_map[code]
        except KeyError:
            raise KeyError(f"code {code!r} is not in the hierarchy leaf map") from None

    def dumps(self) -> str:
        lines = [f"#node {name}" for name in self.names]
        for node in self.bfs():
            for c in self.children[node]:
                lines.append(f"{self.names[node]}>{self.names[c]}")
        for code, leaf in sorted(self.leaf_map.items(), key=lambda kv: (kv[1], kv[0])):
            lines.append(f"#code {code} {self.names[leaf]}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def build_hierarchy(
    edges: Iterable[tuple[str, str]],
    codes: Iterable[tuple[str, str]] = (),
    node_order: Iterable[str] = (),
    pad_ragged: bool = False,
    _lines: dict | None = None,
) -> Hierarchy:
    """Validate an edge list and return a :class:`Hierarchy`.

    With ``pad_ragged`` shallow leaves are pushed down to level H by inserting
    single-child pass-through nodes named ``<parent>~pad<k>`` above them;
    otherwise a leaf above level H is an error.
    """
    lines = _lines or {}
    index: dict[str, int] = {}
    names: list[str] = []

    def intern(name: str) -> int:
        if name not in index:
            index[name] = len(names)
            names.append(name)
        return index[name]

    for name in node_order:
        intern(name)
    parent_of: dict[int, int] = {}
    for k, (p, c) in enumerate(edges):
        pi, ci = intern(p), intern(c)
        if pi == ci:
            raise CycleError(f"self-loop on {p!r}" + _at(lines, ("edge", k)))
        if ci in parent_of and parent_of[ci] != pi:
            raise HierarchyError(
                f"node {c!r} has two parents ({names[parent_of[ci]]!r}, {p!r})" + _at(lines, ("edge", k))
            )
        parent_of[ci] = pi
    if not names:
        raise HierarchyError("empty hierarchy")

    roots = [i for i in range(len(names)) if i not in parent_of]
    if not roots:
        raise CycleError("every node has a parent, the edges contain a cycle")
    if len(roots) > 1:
        raise MultiRootError("multiple roots: " + ", ".join(repr(names[r]) for r in roots))
    root = roots[0]

    children: list[list[int]] = [[] for _ in names]
    for c, p in parent_of.items():
        children[p].append(c)
    for ch in children:
        ch.sort()
    seen, queue = {root}, deque([root])
    while queue:
        node = queue.popleft()
        for c in children[node]:
            seen.add(c)
            queue.append(c)
    if len(seen) != len(names):
        stray = sorted(set(range(len(names))) - seen)
        raise CycleError("nodes unreachable from the root (cycle): " + ", ".join(repr(names[i]) for i in stray[:5]))

    parent = [parent_of.get(i, -1) for i in range(len(names))]

    depth = [0] * len(names)
    queue = deque([root])
    while queue:
        node = queue.popleft()
        for c in children[node]:
            depth[c] = depth[node] + 1
            queue.append(c)
    H = max(depth) + 1
    shallow = [i for i in range(len(names)) if not children[i] and depth[i] + 1 < H]
    if shallow:
        if not pad_ragged:
            i = shallow[0]
            raise LevelError(f"leaf {names[i]!r} is at level {depth[i] + 1}, expected every leaf at level H={H}")
        for leaf in shallow:
            p = parent[leaf]
            for k in range(H - depth[leaf] - 1):
                pad = intern(f"{names[p]}~pad{k}~{names[leaf]}")
                parent.append(p)
                p = pad
            parent[leaf] = p
        logger.info("padded %d ragged leaves to level %d", len(shallow), H)

    h = Hierarchy(names, parent, {})
    leaf_map: dict[str, int] = {}
    codes = list(codes)
    if codes:
        for k, (code, leaf_name) in enumerate(codes):
            if leaf_name not in h.index:
                raise HierarchyError(f"code {code!r} maps to unknown node {leaf_name!r}" + _at(lines, ("code", k)))
            leaf = h.index[leaf_name]
            if h.children[leaf]:
                raise HierarchyError(f"code {code!r} maps to internal node {leaf_name!r}" + _at(lines, ("code", k)))
            if code in leaf_map and leaf_map[code] != leaf:
                raise HierarchyError(f"code {code!r} maps to two leaves" + _at(lines, ("code", k)))
            leaf_map[code] = leaf
    else:
        leaf_map = {h.names[leaf]: leaf for leaf in h.leaves}
    h.leaf_map = leaf_map
    return h


def _at(lines: dict, key) -> str:
    return f" (line {lines[key]})" if key in lines else ""


def parse_hierarchy(text: str, pad_ragged: bool = False) -> Hierarchy:
    edges, codes, order = [], [], []
    lines: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#code"):
            parts = line.split(None, 2)
            if len(parts) != 3:
                raise HierarchyParseError(lineno, "expected '#code <code> <leaf_name>'")
            lines[("code", len(codes))] = lineno
            codes.append((parts[1], parts[2]))
        elif line.startswith("#node"):
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise HierarchyParseError(lineno, "expected '#node <name>'")
            order.append(parts[1])
        elif line.startswith("#"):
            continue
        else:
            if line.count(">") != 1:
                raise HierarchyParseError(lineno, f"expected 'parent>child', got {line!r}")
            p, c = (s.strip() for s in line.split(">"))
            if not p or not c:
                raise HierarchyParseError(lineno, "empty node name")
            lines[("edge", len(edges))] = lineno
            edges.append((p, c))
    return build_hierarchy(edges, codes, order, pad_ragged=pad_ragged, _lines=lines)


def load_hierarchy(path: str | Path, pad_ragged: bool = False) -> Hierarchy:
    return parse_hierarchy(Path(path).read_text(encoding="utf-8"), pad_ragged=pad_ragged)
