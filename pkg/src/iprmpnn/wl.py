"""1-WL colour refinement.

Colours are canonicalised by exact keys (own colour, sorted neighbour-colour
tuple), never by hashes, so collisions cannot merge classes.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

from .graph import AttributedGraph, disjoint_union, induced_subgraph


@dataclass(frozen=True)
class Coloring:
    colors: tuple[int, ...]
    round: int = 0

    @property
    def histogram(self) -> dict[int, int]:
        return dict(Counter(self.colors))

    @property
    def num_classes(self) -> int:
        return len(set(self.colors))

    def classes(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for v, c in enumerate(self.colors):
            out.setdefault(c, []).append(v)
        return out


def canonicalize(labels: Sequence[Hashable], round: int = 0) -> Coloring:
    """Map arbitrary labels to ids 0, 1, ... in first-seen order."""
    ids: dict[Hashable, int] = {}
    return Coloring(tuple(ids.setdefault(lab, len(ids)) for lab in labels), round)


def feature_labels(g: AttributedGraph, column: int | None = None) -> list[Hashable]:
    """Discrete labels read from the feature matrix (whole row, or one column)."""
    if column is None:
        return [tuple(row) for row in g.x.tolist()]
    return [float(v) for v in g.x[:, column]]


def refine_step(g: AttributedGraph, c: Coloring) -> Coloring:
    if len(c.colors) != g.n:
        raise ValueError(f"coloring has {len(c.colors)} entries for {g.n} nodes")
    cols = c.colors
    keys = []
    for v in range(g.n):
        nb = g.indices[g.indptr[v] : g.indptr[v + 1]]
        keys.append((cols[v], tuple(sorted(cols[u] for u in nb))))
    return canonicalize(keys, c.round + 1)


def stable_coloring(
    g: AttributedGraph,
    init: Sequence[Hashable] | None = None,
    use_features: bool = False,
) -> Coloring:
    """Refine until the partition stops splitting (at most n rounds)."""
    if init is None:
        init = feature_labels(g) if use_features else [0] * g.n
    if len(init) != g.n:
        raise ValueError(f"initial labels have length {len(init)} for {g.n} nodes")
    c = canonicalize(init)
    while True:
        nxt = refine_step(g, c)
        if nxt.num_classes == c.num_classes:
            return Coloring(c.colors, c.round)
        c = nxt


def joint_stable_coloring(
    g: AttributedGraph, h: AttributedGraph, use_features: bool = False
) -> tuple[Coloring, Coloring]:
    """Run refinement on the disjoint union so colour ids are shared by both graphs."""
    union = disjoint_union([g, h])
    init = (feature_labels(g) + feature_labels(h)) if use_features else None
    c = stable_coloring(union, init)
    return Coloring(c.colors[: g.n], c.round), Coloring(c.colors[g.n :], c.round)


def wl_distinguishable(g: AttributedGraph, h: AttributedGraph, use_features: bool = False) -> bool:
    if g.n != h.n:
        return True
    cg, ch = joint_stable_coloring(g, h, use_features)
    return Counter(cg.colors) != Counter(ch.colors)


def color_induced_subgraphs(g: AttributedGraph, c: Coloring) -> dict[int, AttributedGraph]:
    return {color: induced_subgraph(g, nodes)[0] for color, nodes in sorted(c.classes().items())}


def color_induced_pairs(
    g: AttributedGraph, h: AttributedGraph
) -> dict[int, tuple[AttributedGraph | None, AttributedGraph | None]]:
    """Same-colour induced subgraphs of two graphs under their joint stable colouring."""
    cg, ch = joint_stable_coloring(g, h)
    sg, sh = color_induced_subgraphs(g, cg), color_induced_subgraphs(h, ch)
    return {color: (sg.get(color), sh.get(color)) for color in sorted(set(sg) | set(sh))}
