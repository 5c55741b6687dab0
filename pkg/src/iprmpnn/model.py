"""IPR-MPNN: learned exactly-k attachment of nodes to virtual nodes plus
hierarchical message passing over the rewired graph.

A forward pass runs, for a batch of graphs:

1. an upstream GIN producing per-node logits over the ``m`` virtual nodes;
2. ``q`` exact k-subset samples per node, made differentiable with the
   marginal straight-through estimator;
3. for every sample, virtual-node initialisation followed by ``layers_down``
   rounds of node->virtual pooling, virtual<->virtual exchange, and
   virtual->node redistribution combined with ordinary neighbour messages;
4. a readout head; predictions are averaged over the ``q`` samples.

The ``q`` samples of a batch are processed together as ``q`` stacked copies of
the disjoint-union graph.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .exactk import _sample_rows, marginals_tensor, straight_through
from .graph import AssignmentMatrix, AttributedGraph
from .params import ParameterStore
from .rng import stream
from .tensor import Tensor

AGGREGATORS = ("sum", "mean", "max")
VIRTUAL_INITS = ("subgraph_mpnn", "random", "identity")
READOUTS = ("nodes", "virtual", "both", "root")
NORMS = ("none", "layer", "batch")
BN_MOMENTUM = 0.1

# stream purposes
_ASSIGN, _VINIT = 0, 1


class ModelError(ValueError):
    pass


@dataclass
class ModelSpec:
    d_in: int
    d_out: int
    d_hidden_up: int = 32
    layers_up: int = 2
    d_hidden_down: int = 32
    d_hidden_virtual: int | None = None  # defaults to 2 * d_hidden_down
    layers_down: int = 1
    m: int = 2
    k: int = 1
    q: int = 2
    q_eval: int | None = None
    virtual_init: str = "identity"
    readout_source: str = "nodes"
    readout_pool: str = "sum"
    agg_n: str = "sum"
    agg_c: str = "sum"
    agg: str = "sum"
    ds: str = "sum"
    use_virtual: bool = True
    residual: bool = True
    norm: str = "none"
    d_edge: int = 0

    def __post_init__(self):
        if self.d_hidden_virtual is None:
            self.d_hidden_virtual = 2 * self.d_hidden_down
        self.validate()

    def validate(self) -> None:
        for name in ("d_in", "d_out", "d_hidden_up", "d_hidden_down", "d_hidden_virtual", "m", "k", "q"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.layers_up < 0 or self.layers_down < 0:
            raise ModelError("layer counts must be non-negative")
        if self.k > self.m:
            raise ModelError(f"k={self.k} exceeds m={self.m}")
        if self.q_eval is not None and self.q_eval < 1:
            raise ModelError("q_eval must be positive")
        if self.virtual_init not in VIRTUAL_INITS:
            raise ModelError(f"virtual_init must be one of {VIRTUAL_INITS}")
        if self.readout_source not in READOUTS:
            raise ModelError(f"readout_source must be one of {READOUTS}")
        if self.readout_pool not in ("sum", "mean"):
            raise ModelError("readout_pool must be sum or mean")
        for name in ("agg_n", "agg_c", "agg", "ds"):
            if getattr(self, name) not in AGGREGATORS:
                raise ModelError(f"{name} must be one of {AGGREGATORS}")
        if self.norm not in NORMS:
            raise ModelError(f"norm must be one of {NORMS}")
        if self.agg == "max":
            raise ModelError("neighbour aggregation supports sum or mean")
        if not self.use_virtual and self.readout_source in ("virtual", "both"):
            raise ModelError("a model without virtual nodes cannot read out from them")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown model fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @property
    def samples_eval(self) -> int:
        return self.q_eval or self.q


@dataclass
class HiddenState:
    h: Tensor
    g: Tensor | None
    layer: int = 0


# ---------------------------------------------------------------------------
# parameters


def _linear_init(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def _mlp(store, rng, prefix, d_in, d_hidden, d_out, batch_norm=False):
    store[f"{prefix}.w1"], store[f"{prefix}.b1"] = _linear_init(rng, d_in, d_hidden)
    if batch_norm:
        store[f"{prefix}.bn_g"], store[f"{prefix}.bn_b"] = np.ones(d_hidden), np.zeros(d_hidden)
        store[f"{prefix}.bn_mean"], store[f"{prefix}.bn_var"] = np.zeros(d_hidden), np.ones(d_hidden)
    store[f"{prefix}.w2"], store[f"{prefix}.b2"] = _linear_init(rng, d_hidden, d_out)


def init_params(spec: ModelSpec, seed: int = 0) -> ParameterStore:
    """Fan-in scaled uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    p = ParameterStore()
    du, dd, dv = spec.d_hidden_up, spec.d_hidden_down, spec.d_hidden_virtual
    bn = spec.norm == "batch"

    if spec.use_virtual:
        if spec.layers_up == 0:
            _mlp(p, rng, "up.mlp", spec.d_in, du, du, bn)
        d_prev = spec.d_in
        for i in range(spec.layers_up):
            _mlp(p, rng, f"up.{i}", d_prev, du, du, bn)
            if spec.d_edge:
                p[f"up.{i}.we"], _ = _linear_init(rng, spec.d_edge, d_prev)
            d_prev = du
        p["up.head.w"], p["up.head.b"] = _linear_init(rng, du, spec.m)

        if spec.virtual_init == "identity":
            p["vn.id"] = rng.normal(0.0, 1.0, size=(spec.m, dv))
        elif spec.virtual_init == "subgraph_mpnn":
            p["vn.enc.w"], p["vn.enc.b"] = _linear_init(rng, spec.d_in, dv)
            _mlp(p, rng, "vn.mpnn", dv, dv, dv, bn)

    p["enc.w"], p["enc.b"] = _linear_init(rng, spec.d_in, dd)
    for t in range(spec.layers_down):
        if spec.use_virtual:
            p[f"an.{t}.w"], p[f"an.{t}.b"] = _linear_init(rng, dd, dv)
            _mlp(p, rng, f"vc.{t}", 3 * dv, dv, dv, bn)
            p[f"dn.{t}.wds"], _ = _linear_init(rng, dv, dd)
            if spec.norm == "layer":
                p[f"vc.{t}.ln_g"], p[f"vc.{t}.ln_b"] = np.ones(dv), np.zeros(dv)
        _mlp(p, rng, f"dn.{t}", dd, dd, dd, bn)
        if spec.norm == "layer":
            p[f"dn.{t}.ln_g"], p[f"dn.{t}.ln_b"] = np.ones(dd), np.zeros(dd)
        if spec.d_edge:
            p[f"dn.{t}.we"], _ = _linear_init(rng, spec.d_edge, dd)
    _mlp(p, rng, "ro", _readout_dim(spec), dd, spec.d_out, bn)
    return p


def _readout_dim(spec: ModelSpec) -> int:
    return {
        "nodes": spec.d_hidden_down,
        "root": spec.d_hidden_down,
        "virtual": spec.d_hidden_virtual,
        "both": spec.d_hidden_down + spec.d_hidden_virtual,
    }[spec.readout_source]


def apply_mlp(params, prefix: str, x: Tensor) -> Tensor:
    h = T.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    if f"{prefix}.bn_g" in params:
        h = batch_norm(params, prefix, h)
    return T.linear(T.relu(h), params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def batch_norm(params, prefix: str, h: Tensor, eps: float = 1e-5) -> Tensor:
    """Column standardisation with learned gain and bias.

    Training mode normalises with the statistics of the rows at hand and folds
    them into the running estimates; otherwise the running estimates are used.
    """
    n, d = h.shape
    mean, var = params[f"{prefix}.bn_mean"], params[f"{prefix}.bn_var"]
    if getattr(params, "training", False) and n > 1:
        z = T.standardize(h, axis=0, eps=eps)
        mean.data = (1 - BN_MOMENTUM) * mean.data + BN_MOMENTUM * h.data.mean(axis=0)
        var.data = (1 - BN_MOMENTUM) * var.data + BN_MOMENTUM * h.data.var(axis=0, ddof=1)
    else:
        scale = 1.0 / np.sqrt(var.data + eps)
        z = T.mul(T.sub(h, Tensor(np.broadcast_to(mean.data, (n, d)))), Tensor(np.broadcast_to(scale, (n, d))))
    z = T.mul(z, T.broadcast_to(params[f"{prefix}.bn_g"], (n, d)))
    return T.add(z, T.broadcast_to(params[f"{prefix}.bn_b"], (n, d)))


def apply_norm(params, prefix: str, x: Tensor, spec: ModelSpec) -> Tensor:
    """Row-wise layer norm with learned gain and bias (identity unless ``norm='layer'``)."""
    if spec.norm != "layer":
        return x
    n, d = x.shape
    y = T.mul(T.layer_norm(x), T.broadcast_to(params[f"{prefix}.ln_g"], (n, d)))
    return T.add(y, T.broadcast_to(params[f"{prefix}.ln_b"], (n, d)))


# ---------------------------------------------------------------------------
# batching


class GraphBatch:
    """Disjoint union of graphs with cached sparse operators."""

    def __init__(self, graphs: Sequence[AttributedGraph], graph_ids: Sequence[int] | None = None, roots=None):
        if not graphs:
            raise ModelError("empty batch")
        self.graphs = list(graphs)
        self.num_graphs = len(graphs)
        self.graph_ids = list(range(len(graphs))) if graph_ids is None else [int(i) for i in graph_ids]
        sizes = np.array([g.n for g in graphs], dtype=np.int64)
        self.sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.n = int(sizes.sum())
        self.x = np.concatenate([g.x for g in graphs]) if self.n else np.zeros((0, graphs[0].x.shape[1]))
        self.node_graph = np.repeat(np.arange(self.num_graphs), sizes)
        srcs, dsts, eas = [], [], []
        for off, g in zip(self.offsets, graphs):
            s, d = g.directed_edges()
            srcs.append(s + off)
            dsts.append(d + off)
            if g.edge_attr is not None:
                eas.append(np.concatenate([g.edge_attr, g.edge_attr]))
        self.src = np.concatenate(srcs)
        self.dst = np.concatenate(dsts)
        self.edge_attr = np.concatenate(eas) if eas and len(eas) == len(graphs) else None
        self.num_edges = len(self.src) // 2
        self.adj = sp.csr_matrix((np.ones(len(self.src)), (self.dst, self.src)), shape=(self.n, self.n))
        if roots is None:
            roots = [g.meta.get("root", 0) for g in graphs]
        self.roots = self.offsets + np.asarray(roots, dtype=np.int64)
        self._rep_cache: dict[int, "_Replicated"] = {}

    def replicate(self, q: int) -> "_Replicated":
        if q not in self._rep_cache:
            self._rep_cache[q] = _Replicated(self, q)
        return self._rep_cache[q]


class _Replicated:
    """``q`` stacked copies of a batch; copy ``s`` of node ``v`` is ``s * n + v``."""

    def __init__(self, batch: GraphBatch, q: int):
        n, G = batch.n, batch.num_graphs
        self.q, self.n, self.G = q, n, G
        shift = np.repeat(np.arange(q) * n, len(batch.src))
        self.src = np.tile(batch.src, q) + shift
        self.dst = np.tile(batch.dst, q) + shift
        N = q * n
        self.N = N
        self.adj = sp.csr_matrix((np.ones(len(self.src)), (self.dst, self.src)), shape=(N, N))
        self.gc = (np.repeat(np.arange(q) * G, n) + np.tile(batch.node_graph, q)).astype(np.int64)
        self.num_gc = q * G
        self.pool = sp.csr_matrix((np.ones(N), (self.gc, np.arange(N))), shape=(self.num_gc, N))
        self.pool_t = self.pool.T.tocsr()
        self.roots = (np.repeat(np.arange(q) * n, G) + np.tile(batch.roots, q)).astype(np.int64)
        self.edge_attr = None if batch.edge_attr is None else np.tile(batch.edge_attr, (q, 1))
        counts = np.bincount(self.gc, minlength=self.num_gc).astype(np.float64)
        self.inv_count = 1.0 / np.maximum(counts, 1.0)


# ---------------------------------------------------------------------------
# message-passing pieces


def neighbor_sum(h: Tensor, adj, src=None, dst=None, edge_emb: Tensor | None = None, mean: bool = False) -> Tensor:
    """Sum (or mean) of neighbour embeddings; with ``edge_emb``, messages are relu(h_u + e_uv)."""
    if edge_emb is None:
        out = T.spmm(adj, h, adj)  # symmetric
    else:
        msg = T.relu(T.add(T.gather_rows(h, src), edge_emb))
        out = T.segment_sum(msg, dst, h.shape[0])
    if mean:
        deg = np.asarray(adj.sum(axis=1)).reshape(-1)
        out = T.scale_rows(out, 1.0 / np.maximum(deg, 1.0))
    return out


def upstream_priors(batch: GraphBatch, spec: ModelSpec, params) -> Tensor:
    """Per-node logits over virtual nodes, shape (n, m)."""
    if batch.x.shape[1] != spec.d_in:
        raise ModelError(f"graphs carry {batch.x.shape[1]} features, model expects {spec.d_in}")
    adj = batch.adj
    h = Tensor(batch.x)
    if spec.layers_up == 0:
        h = T.relu(apply_mlp(params, "up.mlp", h))
    for i in range(spec.layers_up):
        emb = None
        if spec.d_edge and batch.edge_attr is not None:
            emb = T.linear(Tensor(batch.edge_attr), params[f"up.{i}.we"])
        nb = neighbor_sum(h, adj, batch.src, batch.dst, emb)
        h = T.relu(apply_mlp(params, f"up.{i}", T.add(h, nb)))
    return T.linear(h, params["up.head.w"], params["up.head.b"])


def assign_pool(x: Tensor, H: Tensor, gc: np.ndarray, num_gc: int, m: int, op: str = "sum") -> Tensor:
    """Pool node rows into virtual node ``gc * m + c`` weighted by ``H[:, c]``.

    Output shape (num_gc * m, d). Empty pools are zero. ``mean`` divides by the
    (non-differentiated) assignee count; ``max`` passes no gradient to ``H``.
    """
    N, d = x.shape
    X, Hd = x.data, H.data
    if op == "max":
        v, c = np.nonzero(Hd > 0.5)
        return T.segment_max(T.gather_rows(x, v), gc[v] * m + c, num_gc * m)
    rows = (gc[:, None] * m + np.arange(m)[None, :]).reshape(-1)
    cols = np.repeat(np.arange(N), m)
    P = sp.csr_matrix((Hd.reshape(-1), (rows, cols)), shape=(num_gc * m, N))
    out = np.asarray(P @ X)
    scale = None
    if op == "mean":
        counts = np.asarray(P.sum(axis=1)).reshape(-1)
        scale = 1.0 / np.maximum(counts, 1.0)
        out = out * scale[:, None]

    def backward(g):
        if scale is not None:
            g = g * scale[:, None]
        gx = np.asarray(P.T @ g)
        g3 = g.reshape(num_gc, m, d)
        gH = np.empty((N, m))
        for c in range(m):
            gH[:, c] = np.einsum("ij,ij->i", X, g3[gc, c, :])
        return gx, gH

    return T.record_op(out, (x, H), backward)


def assign_distribute(g: Tensor, H: Tensor, gc: np.ndarray, m: int, k: int, op: str = "sum") -> Tensor:
    """Per node, pool the embeddings of its assigned virtual nodes (``DS``)."""
    N = H.shape[0]
    G, Hd = g.data, H.data
    num = G.shape[0]
    if op == "max":
        v, c = np.nonzero(Hd > 0.5)
        return T.segment_max(T.gather_rows(g, gc[v] * m + c), v, N)
    cols = (gc[:, None] * m + np.arange(m)[None, :]).reshape(-1)
    rows = np.repeat(np.arange(N), m)
    P = sp.csr_matrix((Hd.reshape(-1), (rows, cols)), shape=(N, num))
    scale = 1.0 / k if op == "mean" else 1.0
    out = np.asarray(P @ G) * scale

    def backward(grad):
        grad = grad * scale
        gg = np.asarray(P.T @ grad)
        G3 = G.reshape(-1, m, G.shape[1])
        gH = np.empty((N, m))
        for c in range(m):
            gH[:, c] = np.einsum("ij,ij->i", G3[gc, c, :], grad)
        return gg, gH

    return T.record_op(out, (g, H), backward)


def aggregate_to_virtual(state: HiddenState, H: Tensor, rep: _Replicated, spec: ModelSpec, params, t: int) -> Tensor:
    """Pooled node->virtual messages, shape (num_gc * m, d_virtual)."""
    msg = T.relu(T.linear(state.h, params[f"an.{t}.w"], params[f"an.{t}.b"]))
    return assign_pool(msg, H, rep.gc, rep.num_gc, spec.m, spec.agg_n)


def _others(pooled: Tensor, num_gc: int, m: int, op: str) -> Tensor:
    """For each virtual node, aggregate the pooled messages of the other m-1."""
    d = pooled.shape[1]
    if m == 1:
        return Tensor(np.zeros(pooled.shape))
    if op == "max":
        ids = np.repeat(np.arange(num_gc * m), m - 1)
        src = np.array([[gi * m + j for j in range(m) if j != c] for gi in range(num_gc) for c in range(m)]).reshape(-1)
        return T.segment_max(T.gather_rows(pooled, src), ids, num_gc * m)
    p3 = T.reshape(pooled, (num_gc, m, d))
    total = T.broadcast_to(T.sum_(p3, axis=1, keepdims=True), (num_gc, m, d))
    rest = T.reshape(T.sub(total, p3), (num_gc * m, d))
    return T.mul(rest, 1.0 / (m - 1)) if op == "mean" else rest


def update_virtual(state: HiddenState, pooled: Tensor, rep: _Replicated, spec: ModelSpec, params, t: int) -> Tensor:
    others = _others(pooled, rep.num_gc, spec.m, spec.agg_c)
    out = apply_mlp(params, f"vc.{t}", T.concat([state.g, pooled, others], axis=1))
    return apply_norm(params, f"vc.{t}", out, spec)


def update_original(
    state: HiddenState, g_new: Tensor | None, H: Tensor | None, rep: _Replicated, spec: ModelSpec, params, t: int
) -> Tensor:
    h = state.h
    emb = None
    if spec.d_edge and rep.edge_attr is not None:
        emb = T.linear(Tensor(rep.edge_attr), params[f"dn.{t}.we"])
    pre = T.add(h, neighbor_sum(h, rep.adj, rep.src, rep.dst, emb, mean=spec.agg == "mean"))
    if g_new is not None:
        ds = assign_distribute(g_new, H, rep.gc, spec.m, spec.k, spec.ds)
        pre = T.add(pre, T.linear(ds, params[f"dn.{t}.wds"]))
    out = apply_norm(params, f"dn.{t}", apply_mlp(params, f"dn.{t}", pre), spec)
    return T.add(h, out) if spec.residual else out


def init_virtual(
    batch: GraphBatch,
    rep: _Replicated,
    H: Tensor,
    spec: ModelSpec,
    params,
    seed: int = 0,
    keys: Sequence[int] = (),
) -> Tensor:
    """Initial virtual-node embeddings, shape (q * G * m, d_virtual)."""
    m, dv = spec.m, spec.d_hidden_virtual
    nv = rep.num_gc * m
    if spec.virtual_init == "identity":
        return T.gather_rows(params["vn.id"], np.arange(nv) % m)
    if spec.virtual_init == "random":
        blocks = []
        for s in range(rep.q):
            for gid in batch.graph_ids:
                blocks.append(stream(seed, _VINIT, *keys, gid, s).standard_normal((m, dv)))
        return Tensor(np.concatenate(blocks))
    # MPNN over each assignment-induced subgraph, sum-pooled
    x = T.linear(Tensor(np.tile(batch.x, (rep.q, 1))), params["vn.enc.w"], params["vn.enc.b"])
    pooled = []
    for c in range(m):
        mask = T.getitem(H, (slice(None), c))
        z = T.scale_rows(x, mask)
        inner = T.scale_rows(T.spmm(rep.adj, z, rep.adj), mask)
        out = T.scale_rows(apply_mlp(params, "vn.mpnn", T.add(z, inner)), mask)
        pooled.append(T.spmm(rep.pool, out, rep.pool_t))
    return T.reshape(T.stack(pooled, axis=1), (nv, dv))


def readout(state: HiddenState, rep: _Replicated, spec: ModelSpec, params) -> Tensor:
    def pool_nodes():
        s = T.spmm(rep.pool, state.h, rep.pool_t)
        return T.scale_rows(s, rep.inv_count) if spec.readout_pool == "mean" else s

    def pool_virtual():
        g3 = T.reshape(state.g, (rep.num_gc, spec.m, spec.d_hidden_virtual))
        red = T.mean if spec.readout_pool == "mean" else T.sum_
        return red(g3, axis=1)

    src = spec.readout_source
    if src == "root":
        z = T.gather_rows(state.h, rep.roots)
    elif src == "nodes":
        z = pool_nodes()
    elif src == "virtual":
        z = pool_virtual()
    else:
        z = T.concat([pool_nodes(), pool_virtual()], axis=1)
    return apply_mlp(params, "ro", z)


# ---------------------------------------------------------------------------
# full model


@dataclass
class ForwardResult:
    pred: Tensor  # (G, d_out), mean over samples
    theta: Tensor | None = None
    samples: np.ndarray | None = None  # (q, n, m) binary
    states: list = field(default_factory=list)

    def assignments(self, batch: GraphBatch, k: int) -> list[list[AssignmentMatrix]]:
        """Per sample, per graph assignment matrices."""
        if self.samples is None:
            return []
        out = []
        for h in self.samples:
            per = []
            for off, size in zip(batch.offsets, batch.sizes):
                per.append(AssignmentMatrix.from_dense(h[off : off + size], k))
            out.append(per)
        return out


def draw_samples(theta: np.ndarray, batch: GraphBatch, spec: ModelSpec, q: int, seed: int, keys=()) -> np.ndarray:
    """(q, n, m) exact samples; graph ``i`` copy ``s`` uses stream (seed, keys, graph_id, s)."""
    u = np.empty((q,) + theta.shape)
    for s in range(q):
        for gid, off, size in zip(batch.graph_ids, batch.offsets, batch.sizes):
            u[s, off : off + size] = stream(seed, _ASSIGN, *keys, gid, s).random((size, spec.m))
    th = np.broadcast_to(np.clip(theta, -30, 30), u.shape).reshape(-1, spec.m)
    return _sample_rows(th, spec.k, u.reshape(-1, spec.m)).reshape(u.shape)


def forward(
    batch: GraphBatch | Sequence[AttributedGraph] | AttributedGraph,
    spec: ModelSpec,
    params,
    seed: int = 0,
    keys: Sequence[int] = (),
    q: int | None = None,
    samples: np.ndarray | None = None,
    relaxed: bool = False,
    keep_states: bool = False,
    theta: Tensor | None = None,
) -> ForwardResult:
    """Run the model on a batch.

    ``samples`` (q, n, m) overrides sampling; ``relaxed`` replaces the sampled
    assignment by the marginals (smooth diagnostic mode, never used to train);
    ``theta`` bypasses the upstream network with given priors.
    """
    if isinstance(batch, AttributedGraph):
        batch = GraphBatch([batch])
    elif not isinstance(batch, GraphBatch):
        batch = GraphBatch(batch)
    if batch.x.shape[1] != spec.d_in:
        raise ModelError(f"graphs carry {batch.x.shape[1]} features, model expects {spec.d_in}")

    H = None
    if spec.use_virtual:
        if theta is None:
            theta = upstream_priors(batch, spec, params)
        elif theta.shape != (batch.n, spec.m):
            raise ModelError(f"theta must have shape {(batch.n, spec.m)}, got {theta.shape}")
        if samples is not None:
            samples = np.asarray(samples, dtype=np.float64)
            q = samples.shape[0]
        else:
            q = q or spec.q
        if relaxed:
            mu = marginals_tensor(theta, spec.k)
            H = T.concat([mu] * q, axis=0) if q > 1 else mu
            samples = np.broadcast_to(mu.data, (q,) + mu.shape).copy()
        else:
            if samples is None:
                samples = draw_samples(theta.data, batch, spec, q, seed, keys)
            H = straight_through(theta, samples, spec.k)
    else:
        q = 1
    rep = batch.replicate(q)

    x = Tensor(np.tile(batch.x, (q, 1)) if q > 1 else batch.x)
    h = T.linear(x, params["enc.w"], params["enc.b"])
    g = init_virtual(batch, rep, H, spec, params, seed, keys) if spec.use_virtual else None
    state = HiddenState(h, g, 0)
    states = [state] if keep_states else []
    for t in range(spec.layers_down):
        state = layer(state, H, rep, spec, params, t)
        if keep_states:
            states.append(state)

    out = readout(state, rep, spec, params)
    if q > 1:
        out = T.mean(T.reshape(out, (q, batch.num_graphs, spec.d_out)), axis=0)
    return ForwardResult(out, theta, samples, states)


def layer(state: HiddenState, H: Tensor | None, rep: _Replicated, spec: ModelSpec, params, t: int) -> HiddenState:
    """One downstream round: nodes->virtual, virtual<->virtual, virtual->nodes."""
    g_new = None
    if spec.use_virtual:
        pooled = aggregate_to_virtual(state, H, rep, spec, params, t)
        g_new = update_virtual(state, pooled, rep, spec, params, t)
    h_new = update_original(state, g_new, H, rep, spec, params, t)
    return HiddenState(h_new, g_new, t + 1)


def predict(graphs, spec: ModelSpec, params, seed: int = 0, keys=(), q: int | None = None, graph_ids=None) -> np.ndarray:
    batch = graphs if isinstance(graphs, GraphBatch) else GraphBatch(list(graphs), graph_ids)
    return forward(batch, spec, params, seed, keys, q=q or spec.samples_eval).pred.data


def count_message_ops(g: AttributedGraph | None, spec: ModelSpec, n: int | None = None, num_edges: int | None = None) -> int:
    """Pairwise message operations in one downstream layer.

    Neighbour messages (2|E|), node->virtual (n*k), virtual<->virtual
    (m(m-1)) and virtual->node (n*k).
    """
    if g is not None:
        n, num_edges = g.n, g.num_edges
    n = n or 0
    num_edges = num_edges or 0
    if not spec.use_virtual:
        return 2 * num_edges
    return 2 * num_edges + n * spec.k + spec.m * (spec.m - 1) + n * spec.k
