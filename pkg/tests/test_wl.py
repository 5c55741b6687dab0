import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iprmpnn.datasets import csl_graph, cycle_graph, gen_wl_pairs, two_cycles
from iprmpnn.graph import AttributedGraph
from iprmpnn.wl import (
    Coloring,
    canonicalize,
    color_induced_pairs,
    color_induced_subgraphs,
    refine_step,
    stable_coloring,
    wl_distinguishable,
)


def path(n):
    return AttributedGraph(n, [(i, i + 1) for i in range(n - 1)])


STAR3 = AttributedGraph(4, [(0, 1), (0, 2), (0, 3)])
K3 = AttributedGraph(3, [(0, 1), (1, 2), (0, 2)])


def uniform(n):
    return canonicalize([0] * n)


def test_canonical_ids_first_seen():
    c = canonicalize(["b", "a", "b", "c"])
    assert c.colors == (0, 1, 0, 2)
    assert sum(c.histogram.values()) == 4


# --- refine_step ------------------------------------------------------------


def test_refine_regular_graph_is_fixed_point():
    assert refine_step(cycle_graph(6), uniform(6)).num_classes == 1


def test_refine_star_splits_center_from_leaves():
    c = refine_step(STAR3, uniform(4))
    assert c.num_classes == 2
    assert c.colors[1] == c.colors[2] == c.colors[3] != c.colors[0]


def test_refine_p3():
    c = refine_step(path(3), uniform(3))
    assert c.colors[0] == c.colors[2] != c.colors[1]


def test_refine_rejects_wrong_length():
    with pytest.raises(ValueError):
        refine_step(path(3), uniform(2))


# --- stable_coloring --------------------------------------------------------


def test_stable_examples():
    assert stable_coloring(K3).num_classes == 1
    c = stable_coloring(path(4))
    assert c.num_classes == 2
    assert c.colors[0] == c.colors[3] and c.colors[1] == c.colors[2]


@st.composite
def graphs(draw, max_n=9):
    n = draw(st.integers(1, max_n))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True)) if pairs else []
    return AttributedGraph(n, chosen)


@settings(max_examples=60, deadline=None)
@given(graphs())
def test_refinement_monotone_and_bounded(g):
    c = uniform(g.n)
    counts = [c.num_classes]
    for _ in range(g.n + 1):
        c = refine_step(g, c)
        counts.append(c.num_classes)
    assert all(a <= b for a, b in zip(counts, counts[1:]))
    stable = stable_coloring(g)
    assert 1 <= stable.num_classes <= g.n
    assert stable.round <= g.n
    assert refine_step(g, stable).num_classes == stable.num_classes


@settings(max_examples=40, deadline=None)
@given(graphs(), st.randoms(use_true_random=False))
def test_stable_histogram_permutation_invariant(g, rnd):
    perm = list(range(g.n))
    rnd.shuffle(perm)
    assert not wl_distinguishable(g, g.permute(perm))


# --- distinguishability -----------------------------------------------------


def test_distinguishable_examples():
    assert not wl_distinguishable(cycle_graph(6), two_cycles(3))
    assert wl_distinguishable(K3, path(3))
    assert not wl_distinguishable(STAR3, STAR3.permute([3, 1, 0, 2]))


def test_csl_graphs_are_wl_equivalent():
    assert not wl_distinguishable(csl_graph(41, 2), csl_graph(41, 9))


# --- colour-induced subgraphs -------------------------------------------------


def test_color_induced_examples():
    sub = color_induced_subgraphs(cycle_graph(6), stable_coloring(cycle_graph(6)))
    assert list(sub) == [0] and sub[0].edges == cycle_graph(6).edges

    c = stable_coloring(STAR3)
    sub = color_induced_subgraphs(STAR3, c)
    sizes = sorted((s.n, len(s.edges)) for s in sub.values())
    assert sizes == [(1, 0), (3, 0)]

    c = stable_coloring(path(4))
    ends = sub_for_node(path(4), c, 0)
    assert ends.n == 2 and ends.edges == ()


def sub_for_node(g, c, v):
    return color_induced_subgraphs(g, c)[c.colors[v]]


@pytest.mark.parametrize("family, size", [("cycle_split", 3), ("cycle_split", 5), ("csl_pair", 11)])
def test_color_induced_pairs_stay_indistinguishable(family, size):
    graphs_ = gen_wl_pairs(family, size, copies=2, seed=3)
    for a, b in zip(graphs_[::2], graphs_[1::2]):
        assert not wl_distinguishable(a, b)
        for sa, sb in color_induced_pairs(a, b).values():
            assert sa is not None and sb is not None
            assert not wl_distinguishable(sa, sb)


def test_feature_labels_seed_refinement():
    g = AttributedGraph(3, [(0, 1), (1, 2)], x=np.array([[1.0], [0.0], [0.0]]))
    assert stable_coloring(g, use_features=True).num_classes == 3
    assert stable_coloring(g).num_classes == 2
