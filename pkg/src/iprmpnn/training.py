"""Losses, Adam with cosine annealing, and the sampling-aware train/eval loops."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.metrics import average_precision_score

from . import tensor as T
from .graph import AttributedGraph
from .model import ForwardResult, GraphBatch, ModelSpec, forward
from .params import ParameterStore
from .rng import stream
from .tensor import Tensor

log = logging.getLogger(__name__)

HEAD_KINDS = ("multiclass", "binary", "regression_mae", "regression_mse")
_SHUFFLE = 2


class DivergenceError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class TaskHead:
    kind: str
    out_dim: int = 1

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"head kind must be one of {HEAD_KINDS}")
        if self.out_dim < 1:
            raise ValueError("out_dim must be at least 1")

    @property
    def metric_name(self) -> str:
        return {"multiclass": "accuracy", "binary": "accuracy", "regression_mae": "mae", "regression_mse": "mae"}[self.kind]

    @property
    def higher_is_better(self) -> bool:
        return self.kind in ("multiclass", "binary")


def loss(pred: Tensor, target, head: TaskHead) -> Tensor:
    """Mean loss over the batch; classification losses take logits."""
    target = np.asarray(target)
    n = pred.shape[0]
    if head.kind == "multiclass":
        idx = target.astype(np.int64).reshape(-1)
        if idx.shape[0] != n:
            raise ValueError(f"{idx.shape[0]} targets for {n} predictions")
        if np.any(idx < 0) or np.any(idx >= pred.shape[1]):
            raise ValueError(f"class index out of range [0, {pred.shape[1]})")
        picked = T.getitem(T.log_softmax(pred, axis=1), (np.arange(n), idx))
        return T.neg(T.mean(picked))
    y = target.astype(np.float64).reshape(pred.shape)
    if head.kind == "binary":
        # softplus(z) - y z
        sp = T.logaddexp(Tensor(np.zeros(pred.shape)), pred)
        return T.mean(T.sub(sp, T.mul(pred, y)))
    diff = T.sub(pred, y)
    if head.kind == "regression_mae":
        return T.mean(T.abs_(diff))
    return T.mean(T.square(diff))


def task_metric(pred: np.ndarray, target, head: TaskHead) -> float:
    target = np.asarray(target)
    if head.kind == "multiclass":
        return float(np.mean(pred.argmax(axis=1) == target.reshape(-1).astype(np.int64)))
    if head.kind == "binary":
        return float(np.mean((pred.reshape(-1) > 0) == (target.reshape(-1) > 0.5)))
    return float(np.mean(np.abs(pred - target.reshape(pred.shape))))


def average_precision(pred: np.ndarray, target) -> float:
    return float(average_precision_score(np.asarray(target).reshape(-1) > 0.5, pred.reshape(-1)))


# ---------------------------------------------------------------------------
# optimisation


def cosine_lr(step: int, total_steps: int, lr_base: float, lr_min: float) -> float:
    if total_steps <= 0:
        return lr_base
    frac = min(max(step, 0), total_steps) / total_steps
    return lr_min + 0.5 * (lr_base - lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    lr_base: float = 1e-3
    lr_min: float = 0.0
    total_steps: int = 1000
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return cosine_lr(self.step, self.total_steps, self.lr_base, self.lr_min)

    def to_dict(self) -> dict:
        return {
            "lr_base": self.lr_base,
            "lr_min": self.lr_min,
            "total_steps": self.total_steps,
            "betas": list(self.betas),
            "eps": self.eps,
            "clip_norm": self.clip_norm,
            "step": self.step,
        }


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adam_step(params: ParameterStore, grads: dict[str, np.ndarray], opt: OptimizerState) -> None:
    b1, b2 = opt.betas
    lr = opt.lr
    opt.step += 1
    t = opt.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        opt.m[name] = b1 * opt.m[name] + (1 - b1) * g
        opt.v[name] = b2 * opt.v[name] + (1 - b2) * g * g
        mhat = opt.m[name] / (1 - b1**t)
        vhat = opt.v[name] / (1 - b2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + opt.eps)


# ---------------------------------------------------------------------------
# loops


def _targets(graphs: Sequence[AttributedGraph]) -> np.ndarray:
    return np.asarray([g.y for g in graphs])


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _theta_stats(res: ForwardResult) -> dict:
    if res.theta is None:
        return {}
    th = res.theta.data
    return {
        "theta_min": float(np.nanmin(th)) if np.isfinite(th).any() else float("nan"),
        "theta_max": float(np.nanmax(th)) if np.isfinite(th).any() else float("nan"),
        "theta_mean": float(np.nanmean(th)) if np.isfinite(th).any() else float("nan"),
        "theta_nonfinite": int((~np.isfinite(th)).sum()),
    }


def train_step(batch: GraphBatch, targets, spec: ModelSpec, params: ParameterStore, opt: OptimizerState,
               head: TaskHead, seed: int, keys=()) -> tuple[float, np.ndarray]:
    params.zero_grad()
    with T.Tape() as tape, params.train_mode():
        res = forward(batch, spec, params, seed, keys)
        value = loss(res.pred, targets, head)
    lv = value.item()
    if not np.isfinite(lv):
        raise DivergenceError(f"loss became {lv}", _theta_stats(res))
    tape.backward(value)
    grads = params.grads()
    clip_by_global_norm(grads, opt.clip_norm)
    adam_step(params, grads, opt)
    return lv, res.pred.data


def train_epoch(
    dataset: Sequence[AttributedGraph],
    spec: ModelSpec,
    params: ParameterStore,
    opt: OptimizerState,
    head: TaskHead,
    seed: int = 0,
    epoch: int = 0,
    batch_size: int = 32,
    shuffle: bool = True,
) -> dict:
    """One pass over ``dataset``; returns mean loss, task metric, lr and wall time."""
    if not dataset:
        raise ValueError("empty dataset")
    t0 = time.perf_counter()
    n = len(dataset)
    order = stream(seed, _SHUFFLE, epoch).permutation(n) if shuffle else np.arange(n)
    losses, weights, preds, idxs = [], [], [], []
    lr = opt.lr
    for b in _batches(n, batch_size, order):
        graphs = [dataset[i] for i in b]
        batch = GraphBatch(graphs, graph_ids=b)
        lv, pred = train_step(batch, _targets(graphs), spec, params, opt, head, seed, (epoch,))
        losses.append(lv)
        weights.append(len(b))
        preds.append(pred)
        idxs.append(b)
    pred = np.concatenate(preds)
    targets = _targets([dataset[i] for i in np.concatenate(idxs)])
    return {
        "epoch": epoch,
        "split": "train",
        "loss": float(np.average(losses, weights=weights)),
        "metric": task_metric(pred, targets, head),
        "lr": lr,
        "wall_ms": 1000.0 * (time.perf_counter() - t0),
    }


def predict_dataset(
    dataset: Sequence[AttributedGraph],
    spec: ModelSpec,
    params,
    seed: int = 0,
    keys=(),
    batch_size: int = 64,
    q: int | None = None,
) -> np.ndarray:
    out = []
    for start in range(0, len(dataset), batch_size):
        ids = list(range(start, min(start + batch_size, len(dataset))))
        batch = GraphBatch([dataset[i] for i in ids], graph_ids=ids)
        out.append(forward(batch, spec, params, seed, keys, q=q or spec.samples_eval).pred.data)
    return np.concatenate(out)


def evaluate(
    dataset: Sequence[AttributedGraph],
    spec: ModelSpec,
    params,
    head: TaskHead,
    seed: int = 0,
    repeats: int = 1,
    batch_size: int = 64,
    split: str = "test",
) -> dict:
    """Metric over ``repeats`` independent assignment draws (mean, std, per repeat),
    plus the metric of the repeat-averaged prediction."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    targets = _targets(dataset)
    preds, metrics, losses = [], [], []
    for r in range(repeats):
        # key 1_000_000 + r keeps evaluation draws apart from training epochs
        p = predict_dataset(dataset, spec, params, seed, (1_000_000 + r,), batch_size)
        preds.append(p)
        metrics.append(task_metric(p, targets, head))
        losses.append(loss(Tensor(p), targets, head).item())
    avg = np.mean(preds, axis=0)
    report = {
        "split": split,
        "metric_name": head.metric_name,
        "metric": float(np.mean(metrics)),
        "metric_std": float(np.std(metrics)),
        "per_repeat": metrics,
        "ensemble_metric": task_metric(avg, targets, head),
        "loss": float(np.mean(losses)),
        "repeats": repeats,
    }
    if head.kind == "binary":
        report["ap"] = average_precision(avg, targets)
    return report


@dataclass
class FitResult:
    params: ParameterStore
    history: list[dict]
    best_params: ParameterStore | None = None
    best_val: float | None = None


def fit(
    train: Sequence[AttributedGraph],
    spec: ModelSpec,
    head: TaskHead,
    epochs: int,
    lr_base: float = 1e-3,
    lr_min: float = 0.0,
    batch_size: int = 32,
    seed: int = 0,
    params: ParameterStore | None = None,
    val: Sequence[AttributedGraph] | None = None,
    clip_norm: float | None = 5.0,
    callback=None,
) -> FitResult:
    """Train for ``epochs`` with a cosine schedule spanning the whole run."""
    from .model import init_params

    params = params if params is not None else init_params(spec, seed)
    steps_per_epoch = math.ceil(len(train) / batch_size)
    opt = OptimizerState(lr_base=lr_base, lr_min=lr_min, total_steps=max(1, epochs * steps_per_epoch), clip_norm=clip_norm)
    history: list[dict] = []
    best, best_params = None, None
    for epoch in range(epochs):
        rec = train_epoch(train, spec, params, opt, head, seed, epoch, batch_size)
        history.append(rec)
        if val:
            vrep = evaluate(val, spec, params, head, seed, 1, split="val")
            vrec = {"epoch": epoch, "split": "val", "loss": vrep["loss"], "metric": vrep["metric"], "lr": rec["lr"], "wall_ms": 0.0}
            history.append(vrec)
            score = vrep["metric"] if head.higher_is_better else -vrep["metric"]
            if best is None or score > best:
                best, best_params = score, params.copy()
        log.info("epoch %d loss %.4f metric %.4f", epoch, rec["loss"], rec["metric"])
        if callback is not None and callback(epoch, rec, params):
            break
    return FitResult(params, history, best_params, best)
