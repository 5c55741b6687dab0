"""Synthetic benchmarks (trees, CSL, 1-WL-hard pairs) and JSONL ingestion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import AttributedGraph, GraphError
from .rng import stream

CSL_SKIPS = (2, 3, 4, 5, 6, 9, 11, 12, 13, 16)
GENERATORS = ("trees_leafcount", "trees_neighboursmatch", "csl", "wl_pairs")
DATASET_NAMES = GENERATORS + ("jsonl_file",)


class DatasetError(ValueError):
    pass


@dataclass
class DatasetSpec:
    name: str
    params: dict = field(default_factory=dict)
    splits: tuple[float, ...] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise DatasetError(f"dataset name must be one of {DATASET_NAMES}")
        self.splits = tuple(float(s) for s in self.splits)
        if any(s < 0 for s in self.splits) or abs(sum(self.splits) - 1.0) > 1e-9:
            raise DatasetError(f"split fractions must be non-negative and sum to 1, got {self.splits}")

    def to_dict(self) -> dict:
        return {"name": self.name, "params": dict(self.params), "splits": list(self.splits), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(d["name"], dict(d.get("params", {})), tuple(d.get("splits", (0.8, 0.1, 0.1))), int(d.get("seed", 0)))


def complete_binary_tree_edges(depth: int) -> list[tuple[int, int]]:
    """Heap-ordered edges: node i has children 2i+1 and 2i+2; root is 0."""
    n = 2 ** (depth + 1) - 1
    return [((c - 1) // 2, c) for c in range(1, n)]


def leaf_indices(depth: int) -> list[int]:
    return list(range(2**depth - 1, 2 ** (depth + 1) - 1))


def leafcount_graph(depth: int, leaf_bits: Sequence[int]) -> AttributedGraph:
    """Tree whose leaves carry binary labels; target = number of 1-labelled leaves.

    Features one-hot over (label 0, label 1, null); internal nodes are null.
    """
    leaves = leaf_indices(depth)
    if len(leaf_bits) != len(leaves):
        raise DatasetError(f"need {len(leaves)} leaf labels, got {len(leaf_bits)}")
    n = 2 ** (depth + 1) - 1
    x = np.zeros((n, 3))
    x[:, 2] = 1.0
    for v, bit in zip(leaves, leaf_bits):
        x[v] = 0.0
        x[v, 1 if bit else 0] = 1.0
    return AttributedGraph(n, complete_binary_tree_edges(depth), x, y=int(sum(1 for b in leaf_bits if b)), meta={"root": 0})


def gen_trees_leafcount(depth: int, n: int, seed: int = 0) -> list[AttributedGraph]:
    if not 2 <= depth <= 6:
        raise DatasetError(f"trees_leafcount depth must lie in [2, 6], got {depth}")
    rng = stream(seed, depth)
    num_leaves = 2**depth
    out = []
    for i in range(n):
        count = i % (num_leaves + 1)  # cycle through classes for balance
        bits = np.zeros(num_leaves, dtype=int)
        bits[rng.choice(num_leaves, size=count, replace=False)] = 1
        out.append(leafcount_graph(depth, bits.tolist()))
    order = rng.permutation(n)
    return [out[i] for i in order]


def neighboursmatch_graph(depth: int, markers: Sequence[int], labels: Sequence[int], root_marker: int) -> AttributedGraph:
    """Alon-Yahav tree: leaves carry (marker, class); the root carries a marker.

    Markers are 1..L (0 = none), classes 0..L-1. Features are the one-hot
    marker (L+1 wide) followed by the one-hot class with a null slot (L+1 wide).
    The target is the class of the leaf whose marker equals the root's.
    """
    leaves = leaf_indices(depth)
    L = len(leaves)
    if sorted(markers) != list(range(1, L + 1)):
        raise DatasetError("leaf markers must be a permutation of 1..L")
    n = 2 ** (depth + 1) - 1
    x = np.zeros((n, 2 * (L + 1)))
    x[:, 0] = 1.0
    x[:, L + 1] = 1.0
    for v, mk, lab in zip(leaves, markers, labels):
        x[v] = 0.0
        x[v, mk] = 1.0
        x[v, L + 2 + lab] = 1.0
    x[0, 0] = 0.0
    x[0, root_marker] = 1.0
    target = int(labels[list(markers).index(root_marker)])
    return AttributedGraph(n, complete_binary_tree_edges(depth), x, y=target, meta={"root": 0})


def gen_trees_neighboursmatch(depth: int, n: int, seed: int = 0) -> list[AttributedGraph]:
    if not 2 <= depth <= 7:
        raise DatasetError(f"trees_neighboursmatch depth must lie in [2, 7], got {depth}")
    rng = stream(seed, depth)
    L = 2**depth
    out = []
    for _ in range(n):
        markers = (rng.permutation(L) + 1).tolist()
        labels = rng.permutation(L).tolist()
        root_marker = int(rng.integers(1, L + 1))
        out.append(neighboursmatch_graph(depth, markers, labels, root_marker))
    return out


def csl_graph(n_nodes: int, skip: int, y=None) -> AttributedGraph:
    """Circular skip link graph: cycle plus chords i -- i+skip (mod n)."""
    edges = set()
    for i in range(n_nodes):
        for j in (i + 1, i + skip):
            u, v = i, j % n_nodes
            edges.add((min(u, v), max(u, v)))
    return AttributedGraph(n_nodes, sorted(edges), np.ones((n_nodes, 1)), y=y)


def _permuted(g: AttributedGraph, rng) -> AttributedGraph:
    return g.permute(rng.permutation(g.n))


def gen_csl(n_nodes: int = 41, skips: Sequence[int] = CSL_SKIPS, per_class: int = 15, seed: int = 0) -> list[AttributedGraph]:
    skips = list(skips)
    if len(set(skips)) != len(skips):
        raise DatasetError("skip lengths must be pairwise distinct")
    for r in skips:
        if not 2 <= r <= n_nodes // 2:
            raise DatasetError(f"skip {r} invalid for {n_nodes} nodes")
    rng = stream(seed, n_nodes)
    out = []
    for cls, r in enumerate(skips):
        base = csl_graph(n_nodes, r, y=cls)
        out.extend(_permuted(base, rng) for _ in range(per_class))
    return out


def cycle_graph(n: int, y=None) -> AttributedGraph:
    return AttributedGraph(n, [(i, (i + 1) % n) for i in range(n)], np.ones((n, 1)), y=y)


def two_cycles(s: int, y=None) -> AttributedGraph:
    edges = [(i, (i + 1) % s) for i in range(s)] + [(s + i, s + (i + 1) % s) for i in range(s)]
    return AttributedGraph(2 * s, edges, np.ones((2 * s, 1)), y=y)


def random_connected_graph(n: int, extra: int | None = None, seed: int = 0) -> AttributedGraph:
    """Uniform random labelled tree plus `extra` random chords (default n // 2)."""
    if n < 1:
        raise DatasetError("need at least one node")
    rng = stream(seed, n)
    order = rng.permutation(n)
    edges = {tuple(sorted((int(order[i]), int(order[rng.integers(0, i)])))) for i in range(1, n)}
    target = len(edges) + min(n // 2 if extra is None else extra, n * (n - 1) // 2 - len(edges))
    while len(edges) < target:
        u, v = rng.choice(n, 2, replace=False)
        edges.add((int(min(u, v)), int(max(u, v))))
    return AttributedGraph(n, sorted(edges), np.ones((n, 1)))


def random_regular_graph(n: int, d: int = 3, seed: int = 0, max_tries: int = 1000) -> AttributedGraph:
    """d-regular simple graph from the pairing model, rejecting loops and multi-edges."""
    if n * d % 2 or d >= n:
        raise DatasetError(f"no simple {d}-regular graph on {n} nodes")
    rng = stream(seed, n, d)
    stubs = np.repeat(np.arange(n), d)
    for _ in range(max_tries):
        pairs = rng.permutation(stubs).reshape(-1, 2)
        pairs.sort(axis=1)
        if np.any(pairs[:, 0] == pairs[:, 1]):
            continue
        if len(np.unique(pairs, axis=0)) == len(pairs):
            return AttributedGraph(n, [tuple(map(int, p)) for p in pairs], np.ones((n, 1)))
    raise DatasetError(f"pairing model failed {max_tries} times")


def wl_pair(family: str, size: int) -> tuple[AttributedGraph, AttributedGraph]:
    """A non-isomorphic, 1-WL-indistinguishable pair labelled 0 and 1."""
    if family == "cycle_split":
        if size < 3:
            raise DatasetError("cycle_split needs s >= 3")
        return cycle_graph(2 * size, y=0), two_cycles(size, y=1)
    if family == "csl_pair":
        if size < 7:
            raise DatasetError("csl_pair needs at least 7 nodes")
        return csl_graph(size, 2, y=0), csl_graph(size, 3, y=1)
    raise DatasetError(f"unknown wl_pairs family {family!r}")


def gen_wl_pairs(family: str = "cycle_split", size: int | Sequence[int] = 3, copies: int = 1, seed: int = 0) -> list[AttributedGraph]:
    """Node-permuted copies of the pair(s); members labelled 0 and 1."""
    sizes = [size] if isinstance(size, int) else list(size)
    rng = stream(seed, len(sizes))
    out = []
    for s in sizes:
        a, b = wl_pair(family, s)
        for _ in range(copies):
            out.append(_permuted(a, rng))
            out.append(_permuted(b, rng))
    return out


# ---------------------------------------------------------------------------
# JSONL


def write_jsonl(graphs: Iterable[AttributedGraph], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(g.to_json())
            fh.write("\n")


def load_jsonl(path) -> list[AttributedGraph]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise DatasetError(f"{path}:{lineno}: expected an object")
            try:
                out.append(AttributedGraph.from_dict(record))
            except (GraphError, ValueError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# splits


def split_indices(n: int, fractions: Sequence[float], seed: int = 0) -> list[np.ndarray]:
    """Disjoint index sets with the given fractions (last split takes the remainder)."""
    order = stream(seed, 99).permutation(n)
    bounds = np.floor(np.cumsum(fractions) * n + 1e-9).astype(int)
    bounds[-1] = n
    return [np.sort(part) for part in np.split(order, bounds[:-1])]


def kfold_indices(n: int, folds: int, seed: int = 0, labels=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """(train, test) pairs; stratified round-robin when ``labels`` is given."""
    rng = stream(seed, 98)
    assign = np.empty(n, dtype=int)
    if labels is None:
        assign[rng.permutation(n)] = np.arange(n) % folds
    else:
        labels = np.asarray(labels)
        for lab in np.unique(labels):
            idx = np.flatnonzero(labels == lab)
            assign[rng.permutation(idx)] = np.arange(len(idx)) % folds
    return [(np.flatnonzero(assign != f), np.flatnonzero(assign == f)) for f in range(folds)]


def generate(spec: DatasetSpec) -> list[AttributedGraph]:
    p = dict(spec.params)
    if spec.name == "trees_leafcount":
        return gen_trees_leafcount(int(p.get("depth", 4)), int(p.get("n_samples", 1000)), spec.seed)
    if spec.name == "trees_neighboursmatch":
        return gen_trees_neighboursmatch(int(p.get("depth", 4)), int(p.get("n_samples", 1000)), spec.seed)
    if spec.name == "csl":
        return gen_csl(int(p.get("n_nodes", 41)), p.get("skips", CSL_SKIPS), int(p.get("per_class", 15)), spec.seed)
    if spec.name == "wl_pairs":
        return gen_wl_pairs(p.get("family", "cycle_split"), p.get("size", 3), int(p.get("copies", 1)), spec.seed)
    if spec.name == "jsonl_file":
        if "path" not in p:
            raise DatasetError("jsonl_file dataset needs params.path")
        return load_jsonl(p["path"])
    raise DatasetError(f"unknown dataset {spec.name!r}")


def generate_splits(spec: DatasetSpec) -> dict[str, list[AttributedGraph]]:
    graphs = generate(spec)
    names = ("train", "val", "test")[: len(spec.splits)]
    parts = split_indices(len(graphs), spec.splits, spec.seed)
    return {name: [graphs[i] for i in idx] for name, idx in zip(names, parts)}


def num_classes(spec: DatasetSpec) -> int:
    p = spec.params
    if spec.name == "trees_leafcount":
        return 2 ** int(p.get("depth", 4)) + 1
    if spec.name == "trees_neighboursmatch":
        return 2 ** int(p.get("depth", 4))
    if spec.name == "csl":
        return len(p.get("skips", CSL_SKIPS))
    if spec.name == "wl_pairs":
        return 2
    return int(p.get("num_classes", 1))
