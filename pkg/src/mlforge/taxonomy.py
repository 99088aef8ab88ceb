"""Semantic hierarchy among categories: build, validate, query, propagate.

The hierarchy is a forest of rooted trees (each category has at most one
parent). Tagging an image with a category implies every ancestor of that
category, so the central operation is closing a tag set under the parent
relation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import DataError

_MOD = "taxonomy"


@dataclass(frozen=True)
class Category:
    cat_id: int
    name: str
    concept_id: str | None = None


@dataclass(frozen=True)
class LabelGraph:
    """Category vocabulary plus parent edges (forest of rooted trees).

    Immutable after construction; all queries are pure and safe for
    concurrent readers.
    """

    categories: dict[int, Category]
    parent: dict[int, int | None]
    _children: dict[int, list[int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        _validate(self.categories, self.parent)
        children: dict[int, list[int]] = {c: [] for c in self.categories}
        for cat, par in self.parent.items():
            if par is not None:
                children[par].append(cat)
        for kids in children.values():
            kids.sort()
        object.__setattr__(self, "_children", children)

    def __contains__(self, cat_id: int) -> bool:
        return cat_id in self.categories

    def roots(self) -> list[int]:
        return sorted(c for c, p in self.parent.items() if p is None)

    def children(self, cat_id: int) -> list[int]:
        self._require(cat_id)
        return list(self._children[cat_id])

    def _require(self, cat_id: int) -> None:
        if cat_id not in self.categories:
            raise DataError(_MOD, "unknown-category", f"unknown category id {cat_id}")


@dataclass(frozen=True)
class HierarchyStats:
    tree_count: int
    longest_path: int  # node count on the longest root-to-leaf path
    mean_path: float  # mean node count over all root-to-leaf paths


def _validate(categories: dict[int, Category], parent: dict[int, int | None]) -> None:
    if not categories:
        raise DataError(_MOD, "parse", "taxonomy has no categories")
    if set(parent) != set(categories):
        raise DataError(_MOD, "parse", "parent map and category set disagree")
    for cat, par in parent.items():
        if par is None:
            continue
        if par not in categories:
            raise DataError(
                _MOD, "dangling-parent", f"category {cat} names missing parent {par}"
            )
    # Cycle check: walk each node to a root, reusing previously cleared nodes.
    cleared: set[int] = set()
    for start in categories:
        trail = []
        node: int | None = start
        on_trail: set[int] = set()
        while node is not None and node not in cleared:
            if node in on_trail:
                raise DataError(
                    _MOD, "cycle", f"cycle through category {node} in parent chain"
                )
            on_trail.add(node)
            trail.append(node)
            node = parent[node]
        cleared.update(trail)


def load_taxonomy(path) -> LabelGraph:
    """Read a taxonomy file into a validated LabelGraph.

    Format: one record per line, tab-separated fields
    ``cat_id``, ``parent_id`` (-1 for a root), ``concept_id`` (``-`` if
    absent), ``name``. Lines starting with ``#`` are ignored.
    """
    categories: dict[int, Category] = {}
    parent: dict[int, int | None] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(
                    _MOD, "parse", f"line {lineno}: expected 4 tab-separated fields"
                )
            cat_str, parent_str, concept, name = parts
            try:
                cat_id = int(cat_str)
                parent_id = int(parent_str)
            except ValueError:
                raise DataError(_MOD, "parse", f"line {lineno}: non-integer id") from None
            if cat_id < 0:
                raise DataError(_MOD, "parse", f"line {lineno}: negative cat_id {cat_id}")
            if cat_id in categories:
                raise DataError(
                    _MOD, "parse", f"line {lineno}: duplicate cat_id {cat_id}"
                )
            categories[cat_id] = Category(
                cat_id, name, None if concept == "-" else concept
            )
            parent[cat_id] = None if parent_id == -1 else parent_id
    return LabelGraph(categories, parent)


def write_taxonomy(graph: LabelGraph, path) -> None:
    """Inverse of load_taxonomy (records sorted by cat_id)."""
    with open(path, "w", encoding="utf-8") as fh:
        for cat_id in sorted(graph.categories):
            cat = graph.categories[cat_id]
            par = graph.parent[cat_id]
            fh.write(
                f"{cat_id}\t{-1 if par is None else par}\t"
                f"{cat.concept_id if cat.concept_id is not None else '-'}\t{cat.name}\n"
            )


def ancestors(graph: LabelGraph, cat: int) -> set[int]:
    """Strict ancestors of ``cat`` (excluding ``cat`` itself)."""
    graph._require(cat)
    out: set[int] = set()
    node = graph.parent[cat]
    while node is not None:
        out.add(node)
        node = graph.parent[node]
    return out


def propagate_tags(graph: LabelGraph, tags: set[int]) -> set[int]:
    """Close a tag set under the parent relation.

    An image annotated with a category is implicitly annotated with every
    ancestor of that category, so the result is ``tags`` plus all ancestors.
    Unknown tags are a hard error: augmentation correctness depends on a
    consistent vocabulary.
    """
    out: set[int] = set()
    for tag in tags:
        graph._require(tag)
        out.add(tag)
        out.update(ancestors(graph, tag))
    return out


def hierarchy_stats(graph: LabelGraph) -> HierarchyStats:
    """Tree count plus longest/mean root-to-leaf path length.

    Path length counts nodes, not edges, so a 16-node chain has longest
    path 16. The mean averages over all root-to-leaf paths (one per leaf
    in a forest).
    """
    roots = graph.roots()
    depth: dict[int, int] = {}
    leaf_depths: list[int] = []
    stack = [(r, 1) for r in roots]
    while stack:
        node, d = stack.pop()
        depth[node] = d
        kids = graph._children[node]
        if not kids:
            leaf_depths.append(d)
        else:
            stack.extend((k, d + 1) for k in kids)
    return HierarchyStats(
        tree_count=len(roots),
        longest_path=max(leaf_depths),
        mean_path=sum(leaf_depths) / len(leaf_depths),
    )
