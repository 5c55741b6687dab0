import math

import numpy as np
import pytest

from iprmpnn.datasets import gen_trees_leafcount
from iprmpnn.model import GraphBatch, ModelSpec, init_params
from iprmpnn.tensor import Tensor
from iprmpnn.training import (
    DivergenceError,
    OptimizerState,
    TaskHead,
    adam_step,
    clip_by_global_norm,
    cosine_lr,
    evaluate,
    fit,
    loss,
    task_metric,
    train_epoch,
    train_step,
)

MC = TaskHead("multiclass", 3)


# --- losses -------------------------------------------------------------------


def test_loss_examples():
    assert math.isclose(loss(Tensor([[0.0]]), [1], TaskHead("binary")).item(), math.log(2), rel_tol=1e-14)
    assert math.isclose(loss(Tensor([[0.0]]), [0], TaskHead("binary")).item(), math.log(2), rel_tol=1e-14)
    assert loss(Tensor([[1.5]]), [1.5], TaskHead("regression_mae")).item() == 0.0
    expected = -math.log(math.e / (math.e + 2))
    assert math.isclose(loss(Tensor([[1.0, 0.0, 0.0]]), [0], MC).item(), expected, rel_tol=1e-12)
    assert math.isclose(expected, 0.5514, abs_tol=1e-4)


def test_loss_rejects_bad_class():
    with pytest.raises(ValueError):
        loss(Tensor([[1.0, 0.0, 0.0]]), [3], MC)


def test_constant_predictor_on_balanced_binary_set():
    pred = np.zeros((10, 1)) + 1.0
    assert task_metric(pred, [0, 1] * 5, TaskHead("binary")) == 0.5


# --- optimiser ------------------------------------------------------------------


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3
    assert math.isclose(cosine_lr(50, 100, 1e-3, 1e-5), (1e-3 + 1e-5) / 2, rel_tol=1e-12)
    assert math.isclose(cosine_lr(100, 100, 1e-3, 1e-5), 1e-5, rel_tol=1e-12)


def test_adam_zero_gradients_leave_params():
    spec = ModelSpec(d_in=3, d_out=3)
    p = init_params(spec, 0)
    before = {k: v.data.copy() for k, v in p.items()}
    adam_step(p, {k: np.zeros_like(v.data) for k, v in p.items()}, OptimizerState())
    assert all(np.array_equal(before[k], p[k].data) for k in p)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 1.0) == 5.0
    np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])


# --- loops ----------------------------------------------------------------------


def leafcount_setup(depth=2, n=20, **kw):
    data = gen_trees_leafcount(depth, n, 0)
    spec = ModelSpec(d_in=3, d_out=2**depth + 1, readout_source="root", **kw)
    return data, spec, TaskHead("multiclass", 2**depth + 1)


def test_zero_lr_leaves_params_and_repeats_loss():
    data, spec, head = leafcount_setup(q=1)
    spec_det = spec
    p = init_params(spec_det, 0)
    before = {k: v.data.copy() for k, v in p.items()}
    opt = OptimizerState(lr_base=0.0, lr_min=0.0)
    a = train_epoch(data, spec_det, p, opt, head, seed=1, epoch=0)
    b = train_epoch(data, spec_det, p, opt, head, seed=1, epoch=0)
    assert a["loss"] == b["loss"]
    assert all(np.array_equal(before[k], p[k].data) for k in p)


def test_single_example_overfits():
    data, spec, head = leafcount_setup(n=1, m=1, k=1, q=1)
    p = init_params(spec, 0)
    opt = OptimizerState(lr_base=1e-2, lr_min=1e-2)
    batch = GraphBatch(data)
    losses = [train_step(batch, [data[0].y], spec, p, opt, head, 0)[0] for _ in range(50)]
    # Adam drives the loss to float zero within a few steps; strictness is
    # checked until then
    assert all(b < a for a, b in zip(losses, losses[1:]) if a > 1e-12)
    assert losses[-1] < 1e-9


def test_training_is_deterministic():
    data, spec, head = leafcount_setup()
    runs = [[r["loss"] for r in fit(data, spec, head, epochs=3, lr_base=1e-2, seed=5).history] for _ in range(2)]
    assert runs[0] == runs[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_theta_stats():
    data, spec, head = leafcount_setup(n=4)
    p = init_params(spec, 0)
    p["ro.w2"] = np.full(p["ro.w2"].shape, np.inf)
    with pytest.raises(DivergenceError) as info:
        train_epoch(data, spec, p, OptimizerState(), head)
    assert "theta_max" in info.value.diagnostics


def test_evaluate_deterministic_theta_has_zero_std():
    data, spec, head = leafcount_setup(m=1, k=1)
    rep = evaluate(data, spec, init_params(spec, 0), head, repeats=4)
    assert rep["metric_std"] == 0.0 and len(rep["per_repeat"]) == 4
    with pytest.raises(ValueError):
        evaluate(data, spec, init_params(spec, 0), head, repeats=0)


def test_binary_report_has_average_precision():
    data, spec, _ = leafcount_setup(n=10)
    for g in data:
        object.__setattr__(g, "y", int(g.y > 2))
    spec = ModelSpec(d_in=3, d_out=1)
    rep = evaluate(data, spec, init_params(spec, 0), TaskHead("binary"))
    assert 0.0 <= rep["ap"] <= 1.0


def test_fit_tracks_best_validation():
    data, spec, head = leafcount_setup(n=30)
    res = fit(data[:20], spec, head, epochs=2, val=data[20:], lr_base=1e-2)
    assert res.best_params is not None
    assert [r["split"] for r in res.history] == ["train", "val", "train", "val"]
