import json

import numpy as np
import pytest

from iprmpnn.datasets import (
    CSL_SKIPS,
    DatasetError,
    DatasetSpec,
    csl_graph,
    gen_csl,
    gen_trees_leafcount,
    gen_trees_neighboursmatch,
    gen_wl_pairs,
    generate_splits,
    kfold_indices,
    leaf_indices,
    leafcount_graph,
    load_jsonl,
    neighboursmatch_graph,
    random_connected_graph,
    random_regular_graph,
    split_indices,
    write_jsonl,
)
from iprmpnn.graph import connected_components
from iprmpnn.wl import wl_distinguishable


def is_tree(g):
    return len(g.edges) == g.n - 1 and len(connected_components(g)) == 1


# --- trees --------------------------------------------------------------------


def test_leafcount_examples():
    assert leafcount_graph(2, [0, 0, 0, 0]).y == 0
    assert leafcount_graph(2, [1, 1, 1, 1]).y == 4
    assert leafcount_graph(3, [1, 0, 1, 1, 0, 0, 0, 1]).y == 4


def test_leafcount_generator_properties():
    graphs = gen_trees_leafcount(3, 90, 0)
    assert all(is_tree(g) and g.n == 15 for g in graphs)
    counts = np.bincount([g.y for g in graphs], minlength=9)
    assert counts.min() == counts.max() == 10
    for g in graphs[:10]:
        leaves = leaf_indices(3)
        assert g.y == int(g.x[leaves, 1].sum())
        assert np.all(g.x[[v for v in range(g.n) if v not in leaves], 2] == 1)


def test_neighboursmatch_examples():
    g = neighboursmatch_graph(2, [2, 3, 1, 4], [0, 1, 2, 3], root_marker=1)
    assert g.y == 2
    graphs = gen_trees_neighboursmatch(3, 20, 7)
    assert graphs == gen_trees_neighboursmatch(3, 20, 7)
    for g in graphs:
        assert is_tree(g)
        leaves = leaf_indices(3)
        markers = g.x[leaves, 1:9].argmax(axis=1)
        assert sorted(markers) == list(range(8))
        root = g.x[0, 1:9].argmax()
        match = leaves[list(markers).index(root)]
        assert g.y == g.x[match, 10:].argmax()


@pytest.mark.parametrize("fn, bad", [(gen_trees_leafcount, 7), (gen_trees_neighboursmatch, 1)])
def test_depth_range(fn, bad):
    with pytest.raises(DatasetError):
        fn(bad, 1, 0)


def test_neighboursmatch_rejects_repeated_markers():
    with pytest.raises(DatasetError):
        neighboursmatch_graph(2, [1, 1, 2, 3], [0, 1, 2, 3], 1)


# --- CSL and WL pairs -----------------------------------------------------------


def test_csl_protocol():
    graphs = gen_csl(per_class=15)
    assert len(graphs) == 150
    assert all(set(g.degree()) == {4} for g in graphs)
    assert sorted(set(g.y for g in graphs)) == list(range(len(CSL_SKIPS)))
    assert not wl_distinguishable(csl_graph(41, 2), csl_graph(41, 16))


def test_csl_invalid_skip():
    with pytest.raises(DatasetError):
        gen_csl(skips=[2, 2])
    with pytest.raises(DatasetError):
        gen_csl(skips=[30])


@pytest.mark.parametrize("s", [3, 4])
def test_cycle_split_pairs(s):
    a, b = gen_wl_pairs("cycle_split", s)
    assert not wl_distinguishable(a, b)
    assert len(connected_components(a)) == 1 and len(connected_components(b)) == 2
    assert (a.y, b.y) == (0, 1)


def test_wl_pair_size_validation():
    with pytest.raises(DatasetError):
        gen_wl_pairs("cycle_split", 2)


# --- random graphs ----------------------------------------------------------------


def test_random_connected_graph():
    g = random_connected_graph(30, seed=1)
    assert len(connected_components(g)) == 1 and len(g.edges) == 29 + 15
    assert g == random_connected_graph(30, seed=1)


def test_random_regular_graph():
    g = random_regular_graph(64, 3, seed=2)
    assert set(g.degree()) == {3}
    with pytest.raises(DatasetError):
        random_regular_graph(5, 3)


# --- JSONL and splits -----------------------------------------------------------------


def test_jsonl_round_trip_and_empty(tmp_path):
    graphs = gen_trees_leafcount(2, 5, 0)
    write_jsonl(graphs, tmp_path / "g.jsonl")
    assert load_jsonl(tmp_path / "g.jsonl") == graphs
    (tmp_path / "e.jsonl").write_text("")
    assert load_jsonl(tmp_path / "e.jsonl") == []


def test_jsonl_errors_name_the_line(tmp_path):
    good = gen_trees_leafcount(2, 1, 0)[0].to_json()
    bad = json.dumps({"n": 2, "edges": [[0, 1], [1, 0]]})
    (tmp_path / "b.jsonl").write_text(good + "\n" + bad + "\n")
    with pytest.raises(DatasetError, match=":2:"):
        load_jsonl(tmp_path / "b.jsonl")
    (tmp_path / "c.jsonl").write_text("{nope\n")
    with pytest.raises(DatasetError, match=":1:"):
        load_jsonl(tmp_path / "c.jsonl")


def test_splits_disjoint_and_covering():
    parts = split_indices(103, (0.8, 0.1, 0.1), seed=3)
    allidx = np.concatenate(parts)
    assert len(allidx) == 103 and len(set(allidx.tolist())) == 103
    assert [len(p) for p in parts] == [82, 10, 11]


def test_split_fractions_validated():
    with pytest.raises(DatasetError):
        DatasetSpec("csl", splits=(0.5, 0.4))
    with pytest.raises(DatasetError):
        DatasetSpec("nope")


def test_kfold_stratified():
    labels = np.repeat(np.arange(10), 15)
    folds = kfold_indices(150, 10, seed=0, labels=labels)
    tests = np.concatenate([te for _, te in folds])
    assert sorted(tests.tolist()) == list(range(150))
    for tr, te in folds:
        assert len(set(tr.tolist()) & set(te.tolist())) == 0
        assert set(np.bincount(labels[te], minlength=10)) <= {1, 2}


def test_generate_splits_deterministic():
    spec = DatasetSpec("trees_leafcount", {"depth": 2, "n_samples": 50}, seed=4)
    a, b = generate_splits(spec), generate_splits(spec)
    assert a == b and sum(len(v) for v in a.values()) == 50
