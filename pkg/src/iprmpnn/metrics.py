"""Over-squashing diagnostics: total effective resistance and layer-wise
symmetric sensitivity between distant nodes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import shortest_path

from . import tensor as T
from .graph import AssignmentMatrix, AttributedGraph, augmented_graph, connected_components, laplacian
from .model import GraphBatch, HiddenState, ModelSpec, draw_samples, forward, layer, upstream_priors
from .tensor import Tensor

EIG_CUTOFF = 1e-9


@dataclass
class ResistanceReport:
    r_total: float
    per_pair: dict[tuple[int, int], float] | None = None
    graph_id: int | None = None
    components: int = 1

    def to_dict(self) -> dict:
        return {"graph_id": self.graph_id, "r_total": self.r_total, "components": self.components}


def laplacian_pinv(lap: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudoinverse by eigendecomposition, dropping eigenvalues <= 1e-9."""
    if lap.size == 0:
        return lap.copy()
    vals, vecs = np.linalg.eigh(lap)
    keep = vals > EIG_CUTOFF
    return (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T


def _resistance_matrix(lap: np.ndarray) -> np.ndarray:
    lp = laplacian_pinv(lap)
    d = np.diag(lp)
    return d[:, None] + d[None, :] - 2.0 * lp


def _component_mask(g: AttributedGraph) -> np.ndarray:
    labels = np.zeros(g.n, dtype=int)
    for c, nodes in enumerate(connected_components(g)):
        labels[nodes] = c
    return labels[:, None] == labels[None, :]


def _report(R: np.ndarray, same: np.ndarray, n: int, per_pair: bool, graph_id, ncomp: int) -> ResistanceReport:
    iu, ju = np.triu_indices(n, k=1)
    ok = same[iu, ju]
    vals = np.clip(R[iu, ju][ok], 0.0, None)
    pairs = None
    if per_pair:
        pairs = {(int(a), int(b)): float(r) for a, b, r in zip(iu[ok], ju[ok], vals)}
    return ResistanceReport(float(vals.sum()), pairs, graph_id, ncomp)


def effective_resistance(g: AttributedGraph, per_pair: bool = False, graph_id=None) -> ResistanceReport:
    """Total effective resistance over node pairs (intra-component pairs when disconnected)."""
    R = _resistance_matrix(laplacian(g))
    return _report(R, _component_mask(g), g.n, per_pair, graph_id, len(connected_components(g)))


def rewired_resistance(g: AttributedGraph, h: AssignmentMatrix, per_pair: bool = False, graph_id=None) -> ResistanceReport:
    """Total resistance after adding the virtual nodes of ``h``.

    Summed over the same pairs as ``effective_resistance(g)`` so the two totals
    compare directly when ``g`` is disconnected.
    """
    aug = augmented_graph(g, h)
    R = _resistance_matrix(laplacian(aug))[: g.n, : g.n]
    return _report(R, _component_mask(g), g.n, per_pair, graph_id, len(connected_components(aug)))


def pair_resistance_solve(g: AttributedGraph, u: int, v: int) -> float:
    """R(u, v) by grounding ``v`` and solving the reduced Laplacian for a unit current at ``u``."""
    if u == v:
        return 0.0
    lap = laplacian(g)
    keep = [i for i in range(g.n) if i != v]
    rhs = np.zeros(g.n - 1)
    rhs[keep.index(u)] = 1.0
    pot = np.linalg.solve(lap[np.ix_(keep, keep)], rhs)
    return float(pot[keep.index(u)])


def resistance_record(g: AttributedGraph, h: AssignmentMatrix, graph_id=None) -> dict:
    before = effective_resistance(g, graph_id=graph_id)
    after = rewired_resistance(g, h, graph_id=graph_id)
    ratio = math.log(after.r_total / before.r_total) if before.r_total > 0 and after.r_total > 0 else None
    rec = {
        "graph_id": graph_id,
        "r_total_before": before.r_total,
        "r_total_after": after.r_total,
        "log_ratio": ratio,
    }
    if before.components > 1:
        rec["note"] = f"disconnected ({before.components} components); summed over intra-component pairs"
    return rec


def max_attachment(h: AssignmentMatrix) -> int:
    """Largest number of original nodes attached to one virtual node."""
    counts = np.zeros(h.m, dtype=int)
    for r in h.rows:
        counts[list(r)] += 1
    return int(counts.max()) if h.n else 0


def most_distant_pair(g: AttributedGraph) -> tuple[int, int, int]:
    """A diameter-attaining pair, lexicographically smallest."""
    if g.n == 0 or len(connected_components(g)) != 1:
        raise ValueError("most_distant_pair needs a connected graph")
    if g.n == 1:
        return 0, 0, 0
    dist = shortest_path(g.adjacency(), directed=False, unweighted=True)
    best = int(dist.max())
    u, v = np.argwhere(np.triu(dist == best, k=1))[0]
    return int(u), int(v), best


def _fixed_samples(g: AttributedGraph, spec: ModelSpec, params, seed: int) -> np.ndarray | None:
    if not spec.use_virtual:
        return None
    batch = GraphBatch([g])
    theta = upstream_priors(batch, spec, params).data
    return draw_samples(theta, batch, spec, 1, seed)


def layer_jacobian(
    g: AttributedGraph,
    spec: ModelSpec,
    params,
    target: int,
    source: int,
    k_layer: int,
    l_layer: int,
    seed: int = 0,
    samples: np.ndarray | None = None,
) -> np.ndarray:
    """d h^l_target / d h^k_source (d x d) with the assignment held fixed."""
    return _jacobians(g, spec, params, [(target, source)], k_layer, l_layer, seed, samples)[0]


def _jacobians(g, spec, params, pairs, k_layer, l_layer, seed, samples):
    for a, b in pairs:
        for node in (a, b):
            if not 0 <= node < g.n:
                raise ValueError(f"node {node} out of range [0, {g.n})")
    if not 0 <= k_layer <= l_layer <= spec.layers_down:
        raise ValueError(f"need 0 <= k <= l <= {spec.layers_down}, got k={k_layer}, l={l_layer}")
    if samples is None:
        samples = _fixed_samples(g, spec, params, seed)
    batch = GraphBatch([g])
    res = forward(batch, spec, params, seed, samples=samples, keep_states=True, q=1)
    start = res.states[k_layer]
    H = None if samples is None else Tensor(np.asarray(samples).reshape(-1, spec.m))
    rep = batch.replicate(1)
    d = start.h.shape[1]
    out = []
    for a, b in pairs:
        jac = np.zeros((d, d))
        if l_layer == k_layer:
            if a == b:
                jac = np.eye(d)
            out.append(jac)
            continue
        for i in range(d):
            leaf = T.parameter(start.h.data.copy())
            with T.Tape() as tape:
                st = HiddenState(leaf, None if start.g is None else Tensor(start.g.data), k_layer)
                for t in range(k_layer, l_layer):
                    st = layer(st, H, rep, spec, params, t)
                seed_grad = np.zeros(st.h.shape)
                seed_grad[a, i] = 1.0
            if st.h.requires_grad:
                tape.backward(st.h, seed_grad)
            if leaf.grad is not None:
                jac[i] = leaf.grad[b]
        out.append(jac)
    return out


def layer_sensitivity(
    g: AttributedGraph,
    spec: ModelSpec,
    params,
    u: int,
    v: int,
    k_layer: int,
    l_layer: int,
    seed: int = 0,
    samples: np.ndarray | None = None,
) -> float:
    """log of the entrywise L1 norm of d h^l_v/d h^k_u + d h^l_u/d h^k_v; -inf when it is 0.

    For u == v the two terms coincide and a single Jacobian is used, so the
    zero-span case gives log(d).
    """
    if u == v:
        (total,) = _jacobians(g, spec, params, [(u, u)], k_layer, l_layer, seed, samples)
    else:
        j_vu, j_uv = _jacobians(g, spec, params, [(v, u), (u, v)], k_layer, l_layer, seed, samples)
        total = j_vu + j_uv
    norm = float(np.abs(total).sum())
    return math.log(norm) if norm > 0 else float("-inf")


def sensitivity_profile(g: AttributedGraph, spec: ModelSpec, params, seed: int = 0) -> dict:
    """Sensitivity of the most distant pair from layer 0 to every later layer."""
    u, v, dist = most_distant_pair(g)
    samples = _fixed_samples(g, spec, params, seed)
    values = [layer_sensitivity(g, spec, params, u, v, 0, l, seed, samples) for l in range(1, spec.layers_down + 1)]
    return {"u": u, "v": v, "distance": dist, "log_sensitivity": [None if math.isinf(x) else x for x in values],
            "zero": [math.isinf(x) for x in values]}


REPORT_SCHEMA = {
    "type": "object",
    "required": ["records", "summary"],
    "properties": {
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["graph_id", "n", "r_total_before", "r_total_after", "log_ratio", "max_attachment"],
                "properties": {
                    "graph_id": {"type": "integer"},
                    "n": {"type": "integer", "minimum": 0},
                    "r_total_before": {"type": "number", "minimum": 0},
                    "r_total_after": {"type": "number", "minimum": 0},
                    "log_ratio": {"type": ["number", "null"]},
                    "max_attachment": {"type": "integer", "minimum": 0},
                    "note": {"type": "string"},
                    "sensitivity": {
                        "type": "object",
                        "required": ["u", "v", "distance", "log_sensitivity", "zero"],
                        "properties": {
                            "log_sensitivity": {"type": "array", "items": {"type": ["number", "null"]}},
                            "zero": {"type": "array", "items": {"type": "boolean"}},
                        },
                    },
                },
            },
        },
        "summary": {
            "type": "object",
            "required": ["graphs", "attached", "lowered", "mean_log_ratio"],
        },
    },
}


def diagnose_graphs(graphs, spec: ModelSpec, params, seed: int = 0, sensitivity: bool = True) -> dict:
    """Per-graph resistance before/after rewiring plus the sensitivity profile.

    The assignment is one draw from the model's own priors. Without virtual
    nodes the rewired graph is the original one.
    """
    records = []
    for i, g in enumerate(graphs):
        samples = _fixed_samples(g, spec, params, seed)
        if samples is None:
            r = effective_resistance(g, graph_id=i).r_total
            rec = {"graph_id": i, "r_total_before": r, "r_total_after": r, "log_ratio": 0.0 if r > 0 else None}
            attach = 0
        else:
            h = AssignmentMatrix.from_dense(samples[0], spec.k)
            rec = resistance_record(g, h, i)
            attach = max_attachment(h)
        rec["n"] = g.n
        rec["max_attachment"] = attach
        if sensitivity:
            if g.n and len(connected_components(g)) == 1:
                rec["sensitivity"] = sensitivity_profile(g, spec, params, seed)
            else:
                rec.setdefault("note", "disconnected; sensitivity skipped")
        records.append(rec)
    attached = [r for r in records if r["max_attachment"] >= 2]
    ratios = [r["log_ratio"] for r in records if r["log_ratio"] is not None]
    summary = {
        "graphs": len(records),
        "attached": len(attached),
        "lowered": sum(r["r_total_after"] < r["r_total_before"] for r in attached),
        "mean_log_ratio": float(np.mean(ratios)) if ratios else None,
    }
    if sensitivity:
        prof = [r["sensitivity"] for r in records if "sensitivity" in r]
        if prof:
            zero = np.array([p["zero"] for p in prof], dtype=float)
            summary["zero_fraction_by_span"] = zero.mean(axis=0).tolist()
    return {"records": records, "summary": summary}
