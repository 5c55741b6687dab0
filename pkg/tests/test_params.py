import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from iprmpnn.params import MAGIC, ParameterStore


def store():
    return ParameterStore({"a.w": np.arange(6.0).reshape(2, 3), "a.b": np.zeros(3), "s": np.array(2.5)})


def test_binary_round_trip_is_bit_exact(tmp_path):
    p = store()
    p.save(tmp_path / "x.params")
    q = ParameterStore.load(tmp_path / "x.params")
    assert list(q) == list(p)
    for name in p:
        assert q[name].data.tobytes() == p[name].data.tobytes()
    assert (tmp_path / "x.params").read_bytes()[:8] == MAGIC


def test_json_round_trip():
    p = store()
    q = ParameterStore.from_json(p.to_json())
    assert all(np.array_equal(p[k].data, q[k].data) for k in p)


def test_corrupt_files_rejected():
    blob = store().to_bytes()
    with pytest.raises(ValueError, match="magic"):
        ParameterStore.from_bytes(b"NOTPARAM" + blob[8:])
    with pytest.raises(ValueError, match="trailing"):
        ParameterStore.from_bytes(blob + b"\0")


def test_shape_mismatches_lists_offenders():
    p, q = store(), store()
    q["a.w"] = np.zeros((3, 2))
    del q["s"]
    q["extra"] = np.ones(1)
    assert p.shape_mismatches(q) == ["a.w", "extra", "s"]
    assert p.shape_mismatches(store()) == []


def test_copy_is_independent_and_counts():
    p = store()
    c = p.copy()
    c["a.b"].data[0] = 9.0
    assert p["a.b"].data[0] == 0.0
    assert p.num_parameters() == 10


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8), arrays(np.float64, array_shapes(max_dims=3, max_side=4)), max_size=4))
def test_round_trip_property(items):
    p = ParameterStore(items)
    q = ParameterStore.from_bytes(p.to_bytes())
    assert list(q) == list(p)
    for k in p:
        np.testing.assert_array_equal(q[k].data, p[k].data)
