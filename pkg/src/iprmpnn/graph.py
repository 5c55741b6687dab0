"""Undirected attributed graphs, node-to-virtual assignments, and graph utilities."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _cc


class GraphError(ValueError):
    pass


class AttributedGraph:
    """Immutable simple undirected graph with a dense node-feature matrix.

    Edges are stored canonically as sorted ``(u, v)`` pairs with ``u < v``;
    neighbour lists live in CSR arrays (``indptr``/``indices``).
    """

    __slots__ = ("n", "edges", "x", "edge_attr", "y", "indptr", "indices", "meta")

    def __init__(
        self,
        n: int,
        edges: Iterable[Sequence[int]] = (),
        x=None,
        edge_attr=None,
        y: Any = None,
        meta: dict | None = None,
    ):
        n = int(n)
        if n < 0:
            raise GraphError("node count must be non-negative")
        raw = [tuple(int(a) for a in e) for e in edges]
        seen: dict[tuple[int, int], int] = {}
        for pos, e in enumerate(raw):
            if len(e) != 2:
                raise GraphError(f"edge {e} is not a pair")
            u, v = e
            if not (0 <= u < n and 0 <= v < n):
                raise GraphError(f"edge {e} has an endpoint outside [0, {n})")
            if u == v:
                raise GraphError(f"self-loop at node {u}")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise GraphError(f"duplicate edge {key}")
            seen[key] = pos
        order = sorted(seen)
        self.n = n
        self.edges: tuple[tuple[int, int], ...] = tuple(order)

        if x is None:
            x = np.ones((n, 1))
        x = np.array(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(n, -1) if n else x.reshape(0, 1)
        if x.shape[0] != n:
            raise GraphError(f"feature matrix has {x.shape[0]} rows for {n} nodes")
        x.setflags(write=False)
        self.x = x

        if edge_attr is not None:
            ea = np.array(edge_attr, dtype=np.float64)
            if ea.ndim == 1:
                ea = ea.reshape(-1, 1)
            if ea.shape[0] != len(raw):
                raise GraphError(f"edge_attr has {ea.shape[0]} rows for {len(raw)} edges")
            ea = ea[[seen[e] for e in order]] if order else ea.reshape(0, ea.shape[1] if ea.ndim == 2 else 1)
            ea.setflags(write=False)
            edge_attr = ea
        self.edge_attr = edge_attr
        self.y = y
        self.meta = dict(meta or {})

        if order:
            e = np.asarray(order, dtype=np.int64)
            src = np.concatenate([e[:, 0], e[:, 1]])
            dst = np.concatenate([e[:, 1], e[:, 0]])
        else:
            src = dst = np.zeros(0, dtype=np.int64)
        perm = np.lexsort((dst, src))
        self.indices = dst[perm]
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(src, minlength=n))]).astype(np.int64)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_features(self) -> int:
        return self.x.shape[1]

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, v: int) -> list[int]:
        if not 0 <= v < self.n:
            raise GraphError(f"node {v} out of range [0, {self.n})")
        return self.indices[self.indptr[v] : self.indptr[v + 1]].tolist()

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.indices))
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Both orientations of every edge as (src, dst) arrays."""
        if not self.edges:
            z = np.zeros(0, dtype=np.int64)
            return z, z
        e = np.asarray(self.edges, dtype=np.int64)
        return np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]])

    def with_features(self, x) -> "AttributedGraph":
        return AttributedGraph(self.n, self.edges, x, self.edge_attr, self.y, self.meta)

    def permute(self, perm: Sequence[int]) -> "AttributedGraph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(self.n)):
            raise GraphError("not a permutation")
        x = np.zeros_like(self.x)
        x[perm] = self.x
        edges = [(int(perm[u]), int(perm[v])) for u, v in self.edges]
        meta = dict(self.meta)
        if "root" in meta:
            meta["root"] = int(perm[meta["root"]])
        ea = None
        if self.edge_attr is not None:
            order = sorted(range(len(edges)), key=lambda i: (min(edges[i]), max(edges[i])))
            ea, edges = self.edge_attr[order], [edges[i] for i in order]
        return AttributedGraph(self.n, edges, x, ea, self.y, meta)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttributedGraph):
            return NotImplemented
        same_ea = (self.edge_attr is None and other.edge_attr is None) or (
            self.edge_attr is not None and other.edge_attr is not None and np.array_equal(self.edge_attr, other.edge_attr)
        )
        return (
            self.n == other.n
            and self.edges == other.edges
            and np.array_equal(self.x, other.x)
            and same_ea
            and _y_equal(self.y, other.y)
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"AttributedGraph(n={self.n}, |E|={len(self.edges)}, d={self.x.shape[1]})"

    # JSON

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"n": self.n, "edges": [list(e) for e in self.edges], "x": self.x.tolist()}
        if self.edge_attr is not None:
            out["edge_attr"] = self.edge_attr.tolist()
        if self.y is not None:
            out["y"] = self.y.tolist() if isinstance(self.y, np.ndarray) else self.y
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AttributedGraph":
        for key in ("n", "edges"):
            if key not in d:
                raise GraphError(f"missing field {key!r}")
        if not isinstance(d["n"], int) or isinstance(d["n"], bool):
            raise GraphError("field 'n' must be an integer")
        if not isinstance(d["edges"], list):
            raise GraphError("field 'edges' must be a list")
        x = d.get("x")
        if x is not None:
            x = np.asarray(x, dtype=np.float64)
            if d["n"] and x.ndim != 2:
                raise GraphError("field 'x' must be a list of rows")
        return cls(d["n"], d["edges"], x, d.get("edge_attr"), d.get("y"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "AttributedGraph":
        return cls.from_dict(json.loads(text))


def _y_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(np.asarray(a), np.asarray(b))


def neighbors(g: AttributedGraph, v: int) -> list[int]:
    return g.neighbors(v)


def induced_subgraph(g: AttributedGraph, nodes: Iterable[int]) -> tuple[AttributedGraph, dict[int, int]]:
    """Subgraph on ``nodes`` (kept in ascending order) and the old->new index map."""
    keep = sorted(set(int(v) for v in nodes))
    for v in keep:
        if not 0 <= v < g.n:
            raise GraphError(f"node {v} out of range [0, {g.n})")
    remap = {v: i for i, v in enumerate(keep)}
    edges, eidx = [], []
    for pos, (u, v) in enumerate(g.edges):
        if u in remap and v in remap:
            edges.append((remap[u], remap[v]))
            eidx.append(pos)
    ea = None
    if g.edge_attr is not None:
        ea = g.edge_attr[eidx] if eidx else np.zeros((0, g.edge_attr.shape[1]))
    x = g.x[keep] if keep else np.zeros((0, g.x.shape[1]))
    return AttributedGraph(len(keep), edges, x, ea, g.y, g.meta), remap


def laplacian(g: AttributedGraph) -> np.ndarray:
    """Dense combinatorial Laplacian D - A."""
    a = g.adjacency().toarray()
    return np.diag(a.sum(axis=1)) - a


def connected_components(g: AttributedGraph) -> list[list[int]]:
    ncomp, labels = _cc(g.adjacency(), directed=False)
    return [np.flatnonzero(labels == c).tolist() for c in range(ncomp)] if g.n else []


def is_connected(g: AttributedGraph) -> bool:
    return g.n > 0 and len(connected_components(g)) == 1


def disjoint_union(graphs: Sequence[AttributedGraph]) -> AttributedGraph:
    offset, edges, xs = 0, [], []
    for h in graphs:
        edges.extend((u + offset, v + offset) for u, v in h.edges)
        xs.append(h.x)
        offset += h.n
    x = np.concatenate(xs) if xs else np.zeros((0, 1))
    return AttributedGraph(offset, edges, x)


@dataclass(frozen=True)
class AssignmentMatrix:
    """Row ``v`` lists the ``k`` virtual nodes that node ``v`` attaches to."""

    n: int
    m: int
    k: int
    rows: tuple[tuple[int, ...], ...] = field(default=())

    def __post_init__(self):
        rows = tuple(tuple(sorted(int(c) for c in r)) for r in self.rows)
        object.__setattr__(self, "rows", rows)
        if not 1 <= self.k <= self.m:
            raise GraphError(f"need 1 <= k <= m, got k={self.k}, m={self.m}")
        if len(rows) != self.n:
            raise GraphError(f"{len(rows)} rows for {self.n} nodes")
        for v, r in enumerate(rows):
            if len(r) != self.k or len(set(r)) != self.k:
                raise GraphError(f"row {v} must hold exactly {self.k} distinct virtual nodes, got {list(r)}")
            if r and not (0 <= r[0] and r[-1] < self.m):
                raise GraphError(f"row {v} references a virtual node outside [0, {self.m})")

    @classmethod
    def from_dense(cls, h, k: int | None = None) -> "AssignmentMatrix":
        h = np.asarray(h)
        n, m = h.shape
        rows = tuple(tuple(np.flatnonzero(h[v] > 0.5).tolist()) for v in range(n))
        if k is None:
            k = len(rows[0]) if rows else 1
        return cls(n, m, k, rows)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.m))
        for v, r in enumerate(self.rows):
            out[v, list(r)] = 1.0
        return out

    def assigned(self, v: int) -> tuple[int, ...]:
        return self.rows[v]


def inverse_assignment(h: AssignmentMatrix, c: int) -> list[int]:
    if not 0 <= c < h.m:
        raise GraphError(f"virtual node {c} out of range [0, {h.m})")
    return [v for v, r in enumerate(h.rows) if c in r]


def augmented_graph(g: AttributedGraph, h: AssignmentMatrix) -> AttributedGraph:
    """Original edges, node-virtual edges from ``h``, and a clique on the virtual nodes.

    Virtual node ``c`` becomes node ``g.n + c``.
    """
    if h.n != g.n:
        raise GraphError(f"assignment covers {h.n} nodes, graph has {g.n}")
    edges = list(g.edges)
    edges += [(v, g.n + c) for v, r in enumerate(h.rows) for c in r]
    edges += [(g.n + a, g.n + b) for a in range(h.m) for b in range(a + 1, h.m)]
    return AttributedGraph(g.n + h.m, edges, np.zeros((g.n + h.m, 1)))
