import numpy as np
import pytest

from iprmpnn import tensor as T
from iprmpnn.datasets import csl_graph, gen_trees_leafcount, gen_trees_neighboursmatch, gen_wl_pairs
from iprmpnn.graph import AttributedGraph
from iprmpnn.metrics import layer_jacobian
from iprmpnn.model import (
    GraphBatch,
    HiddenState,
    ModelError,
    ModelSpec,
    aggregate_to_virtual,
    batch_norm,
    count_message_ops,
    forward,
    init_params,
    init_virtual,
    update_original,
    update_virtual,
    upstream_priors,
)
from iprmpnn.params import ParameterStore
from iprmpnn.tensor import Tensor

P2 = AttributedGraph(2, [(0, 1)], x=[[1.0], [2.0]])
P3 = AttributedGraph(3, [(0, 1), (1, 2)], x=[[1.0], [2.0], [3.0]])


def unit_spec(**kw):
    base = dict(d_in=1, d_out=1, d_hidden_up=1, layers_up=1, d_hidden_down=1, d_hidden_virtual=1, layers_down=1, m=1, k=1, q=1)
    base.update(kw)
    return ModelSpec(**base)


def identity_params(spec) -> ParameterStore:
    """All weights one, all biases zero: every linear map is the identity (or a plain sum)."""
    p = init_params(spec, 0)
    for name in list(p):
        p[name] = np.zeros_like(p[name].data) if name.split(".")[-1].startswith("b") else np.ones_like(p[name].data)
    return p


def hidden(spec, batch, q, h, g=None):
    rep = batch.replicate(q)
    return rep, HiddenState(Tensor(np.asarray(h, float)), None if g is None else Tensor(np.asarray(g, float)))


# --- spec -------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [dict(k=3, m=2), dict(q=0), dict(d_hidden_down=0), dict(virtual_init="learned"), dict(agg_n="median"),
     dict(agg="max"), dict(use_virtual=False, readout_source="virtual")],
)
def test_spec_validation(kw):
    with pytest.raises(ModelError):
        ModelSpec(d_in=1, d_out=1, **kw)


def test_spec_round_trip_and_virtual_width_default():
    s = ModelSpec(d_in=3, d_out=2, d_hidden_down=16)
    assert s.d_hidden_virtual == 32
    assert ModelSpec.from_dict(s.to_dict()) == s
    with pytest.raises(ModelError):
        ModelSpec.from_dict({**s.to_dict(), "bogus": 1})


# --- upstream ---------------------------------------------------------------


def test_zero_params_give_uniform_priors():
    spec = ModelSpec(d_in=1, d_out=1, m=3)
    p = init_params(spec, 0)
    for name in p:
        p[name] = np.zeros_like(p[name].data)
    theta = upstream_priors(GraphBatch([P3]), spec, p)
    np.testing.assert_array_equal(theta.data, np.zeros((3, 3)))


def test_upstream_hand_computed_on_p2():
    spec = unit_spec()
    theta = upstream_priors(GraphBatch([P2]), spec, identity_params(spec))
    np.testing.assert_allclose(theta.data, [[3.0], [3.0]])


def test_upstream_permutation_equivariance():
    g = gen_trees_neighboursmatch(2, 1, 0)[0]
    spec = ModelSpec(d_in=g.x.shape[1], d_out=4, m=3)
    p = init_params(spec, 1)
    perm = np.random.default_rng(0).permutation(g.n)
    a = upstream_priors(GraphBatch([g]), spec, p).data
    b = upstream_priors(GraphBatch([g.permute(perm)]), spec, p).data
    np.testing.assert_allclose(b[perm], a, atol=1e-12)


def test_upstream_feature_mismatch():
    spec = ModelSpec(d_in=2, d_out=1)
    with pytest.raises(ModelError):
        upstream_priors(GraphBatch([P3]), spec, init_params(spec))


# --- virtual-node initialisation --------------------------------------------------


def test_identity_init_rows_distinct_and_graph_independent():
    spec = ModelSpec(d_in=1, d_out=1, m=2)
    p = init_params(spec, 0)
    outs = []
    for g in (P2, P3):
        b = GraphBatch([g])
        H = Tensor(np.tile([1.0, 0.0], (g.n, 1)))
        outs.append(init_virtual(b, b.replicate(1), H, spec, p).data)
    np.testing.assert_array_equal(outs[0], outs[1])
    assert not np.allclose(outs[0][0], outs[0][1])


def test_subgraph_init_empty_class_is_zero_and_p3_by_hand():
    spec = unit_spec(m=2, virtual_init="subgraph_mpnn")
    p = identity_params(spec)
    b = GraphBatch([P3])
    H = Tensor(np.tile([1.0, 0.0], (3, 1)))  # everything on virtual node 0
    g0 = init_virtual(b, b.replicate(1), H, spec, p).data
    # per node: x_v + sum of neighbours = 3, 6, 5
    np.testing.assert_allclose(g0, [[14.0], [0.0]])


def test_random_init_reproducible_from_seed():
    spec = ModelSpec(d_in=1, d_out=1, m=2, virtual_init="random")
    p = init_params(spec, 0)
    b = GraphBatch([P3])
    H = Tensor(np.tile([1.0, 0.0], (3, 1)))
    a = init_virtual(b, b.replicate(1), H, spec, p, seed=5).data
    c = init_virtual(b, b.replicate(1), H, spec, p, seed=5).data
    d = init_virtual(b, b.replicate(1), H, spec, p, seed=6).data
    assert np.array_equal(a, c) and not np.array_equal(a, d)


# --- the three phases -------------------------------------------------------------


def test_aggregate_examples():
    spec = unit_spec(m=2)
    p = identity_params(spec)
    b = GraphBatch([P2])
    rep, st = hidden(spec, b, 1, [[1.0], [2.0]])
    pooled = aggregate_to_virtual(st, Tensor([[1.0, 0.0], [1.0, 0.0]]), rep, spec, p, 0).data
    np.testing.assert_allclose(pooled, [[3.0], [0.0]])
    single = aggregate_to_virtual(st, Tensor([[0.0, 1.0], [1.0, 0.0]]), rep, spec, p, 0).data
    np.testing.assert_allclose(single, [[2.0], [1.0]])
    mean_spec = unit_spec(m=2, agg_n="mean")
    rep, st = hidden(mean_spec, b, 1, [[2.0], [2.0]])
    pooled = aggregate_to_virtual(st, Tensor([[1.0, 0.0], [1.0, 0.0]]), rep, mean_spec, p, 0).data
    np.testing.assert_allclose(pooled, [[2.0], [0.0]])


def test_update_virtual_examples():
    b = GraphBatch([P2])
    spec1 = unit_spec(m=1)
    p1 = identity_params(spec1)
    rep, st = hidden(spec1, b, 1, [[0.0], [0.0]], g=[[1.0]])
    # m = 1: no other virtual nodes, so only previous state and own pool count
    np.testing.assert_allclose(update_virtual(st, Tensor([[2.0]]), rep, spec1, p1, 0).data, [[3.0]])

    spec2 = unit_spec(m=2)
    p2 = identity_params(spec2)
    rep, st = hidden(spec2, b, 1, [[0.0], [0.0]], g=[[1.0], [1.0]])
    same = update_virtual(st, Tensor([[2.0], [2.0]]), rep, spec2, p2, 0).data
    assert same[0, 0] == same[1, 0]
    out = update_virtual(st, Tensor([[2.0], [5.0]]), rep, spec2, p2, 0).data
    # c=0: g + own + other = 1 + 2 + 5
    np.testing.assert_allclose(out, [[8.0], [8.0]])
    rep, st = hidden(spec2, b, 1, [[0.0], [0.0]], g=[[0.0], [0.0]])
    p2["vc.0.w1"] = np.array([[0.0], [0.0], [1.0]])  # read only the "others" slot
    np.testing.assert_allclose(update_virtual(st, Tensor([[2.0], [5.0]]), rep, spec2, p2, 0).data, [[5.0], [2.0]])


def test_update_original_examples():
    spec = unit_spec(m=2, residual=False)
    p = identity_params(spec)
    b = GraphBatch([P2])
    rep, st = hidden(spec, b, 1, [[1.0], [2.0]])
    H = Tensor([[0.0, 1.0], [1.0, 0.0]])
    g_new = Tensor([[10.0], [20.0]])
    out = update_original(st, g_new, H, rep, spec, p, 0).data
    # h'_0 = h_0 + h_1 + g_{a(0)} = 1 + 2 + 20
    np.testing.assert_allclose(out, [[23.0], [13.0]])

    p["dn.0.wds"] = np.zeros((1, 1))
    plain = update_original(st, Tensor(np.zeros((2, 1))), H, rep, spec, p, 0).data
    base = update_original(st, None, None, rep, spec, p, 0).data
    np.testing.assert_allclose(plain, base)

    iso = AttributedGraph(1, [], x=[[4.0]])
    b1 = GraphBatch([iso])
    rep1, st1 = hidden(spec, b1, 1, [[4.0]])
    p = identity_params(spec)
    np.testing.assert_allclose(update_original(st1, Tensor([[0.0], [7.0]]), Tensor([[0.0, 1.0]]), rep1, spec, p, 0).data, [[11.0]])


# --- forward ----------------------------------------------------------------------


def test_one_node_graph_hand_trace():
    spec = unit_spec(readout_source="nodes")
    p = identity_params(spec)
    g = AttributedGraph(1, [], x=[[2.0]])
    # enc: h0 = 2; g0 = 1; pooled = 2; g1 = 1 + 2 + 0 = 3;
    # h1 = h0 + MLP(h0 + 0 + g1) = 2 + 5 = 7; readout 7
    out = forward(g, spec, p, seed=0).pred.data
    np.testing.assert_allclose(out, [[7.0]])


def test_identical_samples_mean_equals_single():
    g = gen_trees_leafcount(2, 1, 0)[0]
    spec = ModelSpec(d_in=3, d_out=5, m=2, k=1, readout_source="root")
    p = init_params(spec, 0)
    s = np.zeros((1, g.n, 2))
    s[0, :, 0] = 1.0
    s[0, ::2] = [0.0, 1.0]
    one = forward(g, spec, p, samples=s).pred.data
    two = forward(g, spec, p, samples=np.concatenate([s, s])).pred.data
    np.testing.assert_allclose(one, two, atol=1e-12)


def test_saturated_priors_make_output_seed_independent():
    g = gen_trees_leafcount(2, 1, 0)[0]
    spec = ModelSpec(d_in=3, d_out=5, m=3, k=2, q=3)
    p = init_params(spec, 0)
    theta = Tensor(np.tile([30.0, 30.0, -30.0], (g.n, 1)))
    a = forward(g, spec, p, seed=1, theta=theta).pred.data
    b = forward(g, spec, p, seed=2, theta=theta).pred.data
    np.testing.assert_array_equal(a, b)


def test_permutation_equivariance_with_deterministic_assignment():
    g = csl_graph(11, 3)
    spec = ModelSpec(d_in=1, d_out=3, m=3, k=2, layers_down=2, readout_source="nodes")
    p = init_params(spec, 4)
    rng = np.random.default_rng(0)
    theta = np.where(rng.random((g.n, 3)) < 0.5, 30.0, -30.0)
    theta[:, 0] = 30.0
    theta[:, 1] = np.where(theta[:, 2] > 0, -30.0, 30.0)
    perm = rng.permutation(g.n)
    tp = np.zeros_like(theta)
    tp[perm] = theta
    a = forward(g, spec, p, theta=Tensor(theta)).pred.data
    b = forward(g.permute(perm), spec, p, theta=Tensor(tp)).pred.data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_batch_prediction_matches_individual():
    graphs = gen_trees_leafcount(2, 3, 0)
    spec = ModelSpec(d_in=3, d_out=5, q=2)
    p = init_params(spec, 0)
    batch = forward(GraphBatch(graphs, graph_ids=[0, 1, 2]), spec, p, seed=3).pred.data
    for i, g in enumerate(graphs):
        single = forward(GraphBatch([g], graph_ids=[i]), spec, p, seed=3).pred.data
        np.testing.assert_allclose(single[0], batch[i], atol=1e-10)


def test_single_virtual_node_attaches_everything():
    g = csl_graph(11, 2)
    spec = ModelSpec(d_in=1, d_out=2, m=1, k=1)
    res = forward(g, spec, init_params(spec, 0))
    assert np.all(res.samples == 1.0)


def test_under_reaching_witness():
    L = 3
    n = L + 3  # endpoints are L + 2 hops apart
    g = AttributedGraph(n, [(i, i + 1) for i in range(n - 1)], x=np.ones((n, 1)))
    base = ModelSpec(d_in=1, d_out=1, layers_down=L, use_virtual=False)
    jac = layer_jacobian(g, base, init_params(base, 0), n - 1, 0, 0, L)
    assert np.all(jac == 0.0)
    ipr = ModelSpec(d_in=1, d_out=1, layers_down=L, m=2, k=1)
    samples = np.zeros((1, n, 2))
    samples[0, :, 0] = 1.0
    jac = layer_jacobian(g, ipr, init_params(ipr, 0), n - 1, 0, 0, L, samples=samples)
    assert np.abs(jac).sum() > 0


@pytest.mark.parametrize(
    "graphs",
    [gen_trees_leafcount(4, 4, 0), gen_trees_neighboursmatch(4, 4, 0), [csl_graph(41, 5)], gen_wl_pairs("cycle_split", 4)],
)
def test_activations_finite_for_small_gaussian_params(graphs):
    spec = ModelSpec(d_in=graphs[0].x.shape[1], d_out=3, layers_down=4, m=4, k=2, q=2, readout_source="both")
    p = init_params(spec, 0)
    rng = np.random.default_rng(0)
    for name in p:
        p[name] = rng.normal(0.0, 0.1, p[name].shape)
    res = forward(graphs, spec, p, keep_states=True)
    assert np.all(np.isfinite(res.pred.data))
    for s in res.states:
        assert np.all(np.isfinite(s.h.data)) and np.all(np.isfinite(s.g.data))


def test_relaxed_forward_theta_gradient_matches_finite_differences():
    g = AttributedGraph(3, [(0, 1), (1, 2)], x=[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    spec = ModelSpec(d_in=2, d_out=1, d_hidden_up=2, d_hidden_down=2, d_hidden_virtual=2, m=2, k=1, q=1)
    p = init_params(spec, 3)
    theta0 = np.random.default_rng(1).normal(size=(3, 2))

    def f(t):
        return T.sum_(T.square(forward(g, spec, p, theta=t, relaxed=True).pred))

    assert T.grad_check(f, theta0, eps=1e-6) < 1e-5


def test_norm_option_adds_parameters_and_runs():
    spec = ModelSpec(d_in=1, d_out=2, norm="layer", layers_down=2)
    p = init_params(spec, 0)
    assert "dn.1.ln_g" in p and "vc.0.ln_b" in p
    assert np.all(np.isfinite(forward(csl_graph(11, 2), spec, p).pred.data))


def test_batch_norm_train_and_eval_modes():
    spec = ModelSpec(d_in=3, d_out=2, norm="batch")
    p = init_params(spec, 0)
    x = np.random.default_rng(0).normal(2.0, 3.0, size=(50, spec.d_hidden_down))
    with p.train_mode():
        z = batch_norm(p, "ro", Tensor(x)).data
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-4)
    np.testing.assert_allclose(p["ro.bn_mean"].data, 0.1 * x.mean(axis=0))
    assert not p.training
    # eval mode is row-wise: a row's output does not depend on its batch
    full = batch_norm(p, "ro", Tensor(x)).data
    np.testing.assert_allclose(batch_norm(p, "ro", Tensor(x[:1])).data, full[:1])


def test_batch_norm_buffers_are_not_trained():
    spec = ModelSpec(d_in=3, d_out=2, norm="batch")
    p = init_params(spec, 0)
    assert "ro.bn_var" in p and "ro.bn_var" not in p.grads()
    assert "ro.bn_g" in p.grads()


def test_batch_norm_model_is_permutation_equivariant_in_eval_mode():
    g = csl_graph(11, 3)
    spec = ModelSpec(d_in=1, d_out=3, m=1, k=1, layers_down=2, readout_source="nodes", norm="batch")
    p = init_params(spec, 4)
    with p.train_mode():
        forward(g, spec, p)  # populate running statistics
    perm = np.random.default_rng(1).permutation(g.n)
    a = forward(g, spec, p).pred.data
    b = forward(g.permute(perm), spec, p).pred.data
    np.testing.assert_allclose(a, b, atol=1e-9)


# --- message counting -------------------------------------------------------------


def test_count_message_ops_examples():
    spec = ModelSpec(d_in=1, d_out=1, m=2, k=1)
    assert count_message_ops(AttributedGraph(2, [(0, 1)]), spec) == 8
    assert count_message_ops(AttributedGraph(0, []), spec) == 2
    spec4 = ModelSpec(d_in=1, d_out=1, m=4, k=2)
    small = count_message_ops(None, spec4, n=100, num_edges=150)
    big = count_message_ops(None, spec4, n=200, num_edges=300)
    assert big - 12 == 2 * (small - 12)
