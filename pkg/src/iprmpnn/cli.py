"""Command-line frontend: gen, train, eval, verify-sampler, diagnose.

Every command reads one JSON config document::

    {"dataset": {"name": ..., "params": {...}, "splits": [...], "seed": 0},
     "model": {...ModelSpec fields...},
     "optim": {"lr_base": 1e-3, "lr_min": 0.0, "epochs": 100, "batch_size": 32, "clip_norm": 5.0},
     "task": {"kind": "multiclass", "out_dim": 17},
     "seed": 0, "output_dir": "runs/x"}

Dot-path flags override entries (``--model.m=4``); ``IPR_SEED`` overrides ``seed``.
Exit codes: 0 success, 1 failed verification, 2 usage/config, 3 divergence,
4 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import datasets as D
from .exactk import ExactKError
from .graph import AttributedGraph, GraphError
from .model import ModelError, ModelSpec, init_params
from .params import ParameterStore
from .training import DivergenceError, OptimizerState, TaskHead, evaluate, train_epoch

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4
SPLITS = ("train", "val", "test")
OPTIM_DEFAULTS = {"lr_base": 1e-3, "lr_min": 0.0, "epochs": 100, "batch_size": 32, "clip_norm": 5.0}


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``--a.b=value`` flags; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"bad override {item!r}; expected --path.to.key=value")
        path, value = item[2:].split("=", 1)
        keys = path.split(".")
        node = cfg
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {path!r} descends into a non-object")
        node[keys[-1]] = _parse_value(value)
    return cfg


@dataclass
class ExperimentConfig:
    dataset: D.DatasetSpec
    model: ModelSpec
    optim: dict
    head: TaskHead
    seed: int
    output_dir: Path
    raw: dict

    @property
    def data_dir(self) -> Path:
        return self.output_dir / "data"


def _infer_head(ds: D.DatasetSpec, task: dict | None) -> TaskHead:
    if task:
        return TaskHead(task.get("kind", "multiclass"), int(task.get("out_dim", 1)))
    if ds.name == "jsonl_file":
        raise UsageError("jsonl_file datasets need a 'task' section with kind and out_dim")
    return TaskHead("multiclass", D.num_classes(ds))


def _feature_dim(ds: D.DatasetSpec) -> int:
    probe = D.DatasetSpec(ds.name, {**ds.params, "n_samples": 1, "copies": 1, "per_class": 1}, ds.splits, ds.seed)
    graphs = D.generate(probe)
    return int(graphs[0].x.shape[1])


def load_config(path: str | None, overrides: list[str], need_model: bool = True) -> ExperimentConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    raw = apply_overrides(raw, overrides)
    if "IPR_SEED" in os.environ:
        try:
            raw["seed"] = int(os.environ["IPR_SEED"])
        except ValueError:
            raise UsageError("IPR_SEED must be an integer") from None
    seed = int(raw.get("seed", 0))
    if seed < 0:
        raise UsageError("seed must be non-negative")
    if "dataset" not in raw:
        raise UsageError("config needs a 'dataset' section")
    try:
        ds = D.DatasetSpec.from_dict(raw["dataset"])
        head = _infer_head(ds, raw.get("task"))
        model_cfg = dict(raw.get("model", {}))
        model = None
        if need_model:
            model_cfg.setdefault("d_out", head.out_dim)
            if "d_in" not in model_cfg:
                model_cfg["d_in"] = _feature_dim(ds) if ds.name != "jsonl_file" else int(ds.params.get("d_in", 1))
            model = ModelSpec.from_dict(model_cfg)
    except (D.DatasetError, ModelError, ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    optim = {**OPTIM_DEFAULTS, **raw.get("optim", {})}
    unknown = set(optim) - set(OPTIM_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown optim fields: {sorted(unknown)}")
    out = Path(raw.get("output_dir", "runs/default"))
    return ExperimentConfig(ds, model, optim, head, seed, out, raw)


# ---------------------------------------------------------------------------
# data files


def _manifest_path(cfg: ExperimentConfig) -> Path:
    return cfg.data_dir / "manifest.json"


def write_dataset(cfg: ExperimentConfig, force: bool) -> dict:
    if cfg.dataset.name == "jsonl_file":
        raise UsageError("gen needs a generator dataset, not jsonl_file")
    if _manifest_path(cfg).exists() and not force:
        raise UsageError(f"{cfg.data_dir} already holds a dataset; pass --force to overwrite")
    try:
        parts = D.generate_splits(cfg.dataset)
    except D.DatasetError as exc:
        raise UsageError(str(exc)) from None
    cfg.data_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, graphs in parts.items():
        path = cfg.data_dir / f"{name}.jsonl"
        D.write_jsonl(graphs, path)
        files[name] = path.name
    manifest = {
        "dataset": cfg.dataset.to_dict(),
        "seed": cfg.dataset.seed,
        "counts": {name: len(g) for name, g in parts.items()},
        "files": files,
    }
    _manifest_path(cfg).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_splits(cfg: ExperimentConfig) -> dict[str, list[AttributedGraph]]:
    if cfg.dataset.name == "jsonl_file":
        graphs = D.load_jsonl(cfg.dataset.params["path"])
        idx = D.split_indices(len(graphs), cfg.dataset.splits, cfg.dataset.seed)
        return {name: [graphs[i] for i in part] for name, part in zip(SPLITS, idx)}
    if not _manifest_path(cfg).exists():
        raise UsageError(f"no dataset under {cfg.data_dir}; run 'gen' first")
    manifest = json.loads(_manifest_path(cfg).read_text())
    return {name: D.load_jsonl(cfg.data_dir / fname) for name, fname in manifest["files"].items()}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Path, params: ParameterStore, opt: OptimizerState | None = None, epoch: int = -1) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    params.save(path)
    if opt is not None:
        meta = {"epoch": epoch, "opt": opt.to_dict()}
        Path(str(path) + ".opt.json").write_text(json.dumps(meta, sort_keys=True))
        arrays = {f"m/{k}": v for k, v in opt.m.items()} | {f"v/{k}": v for k, v in opt.v.items()}
        np.savez(str(path) + ".opt.npz", **arrays)


def load_checkpoint(path, spec: ModelSpec, seed: int) -> ParameterStore:
    try:
        params = ParameterStore.load(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None
    bad = init_params(spec, seed).shape_mismatches(params)
    if bad:
        raise MismatchError("checkpoint does not match the model config: " + ", ".join(bad))
    return params


def load_optimizer(path) -> tuple[OptimizerState, int]:
    meta = json.loads(Path(str(path) + ".opt.json").read_text())
    o = meta["opt"]
    opt = OptimizerState(o["lr_base"], o["lr_min"], o["total_steps"], tuple(o["betas"]), o["eps"], o["clip_norm"], o["step"])
    with np.load(str(path) + ".opt.npz") as z:
        for key in z.files:
            kind, name = key.split("/", 1)
            (opt.m if kind == "m" else opt.v)[name] = z[key]
    return opt, int(meta["epoch"])


# ---------------------------------------------------------------------------
# commands


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_gen(cfg: ExperimentConfig, args) -> int:
    _emit(write_dataset(cfg, args.force))
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    splits = load_splits(cfg)
    train = splits.get("train") or []
    val = splits.get("val") or []
    o = cfg.optim
    epochs, bs = int(o["epochs"]), int(o["batch_size"])
    ckpt_dir = cfg.output_dir / "checkpoints"
    metrics_path = cfg.output_dir / "metrics.jsonl"
    if args.resume:
        params = load_checkpoint(args.resume, cfg.model, cfg.seed)
        opt, last = load_optimizer(args.resume)
        start = last + 1
        mode = "a"
    else:
        params = init_params(cfg.model, cfg.seed)
        steps = max(1, epochs * math.ceil(max(len(train), 1) / bs))
        opt = OptimizerState(float(o["lr_base"]), float(o["lr_min"]), steps, clip_norm=o["clip_norm"])
        start = 0
        mode = "w"
        if metrics_path.exists() and not args.force:
            raise UsageError(f"{metrics_path} exists; pass --force to overwrite")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n")
    best = None
    save_checkpoint(ckpt_dir / "best.params", params)
    with open(metrics_path, mode, encoding="utf-8") as log:
        for epoch in range(start, epochs):
            if not train:
                raise UsageError("training split is empty")
            try:
                rec = train_epoch(train, cfg.model, params, opt, cfg.head, cfg.seed, epoch, bs)
            except DivergenceError as exc:
                print(json.dumps({"error": str(exc), "epoch": epoch, "diagnostics": exc.diagnostics}), file=sys.stderr)
                return EXIT_DIVERGED
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            if val:
                rep = evaluate(val, cfg.model, params, cfg.head, cfg.seed, 1, split="val")
                vrec = {"epoch": epoch, "split": "val", "loss": rep["loss"], "metric": rep["metric"], "lr": rec["lr"], "wall_ms": 0.0}
                log.write(json.dumps(vrec, sort_keys=True) + "\n")
                score = rep["metric"] if cfg.head.higher_is_better else -rep["metric"]
                if best is None or score > best:
                    best = score
                    save_checkpoint(ckpt_dir / "best.params", params)
            log.flush()
            save_checkpoint(ckpt_dir / "last.params", params, opt, epoch)
            if not val:
                save_checkpoint(ckpt_dir / "best.params", params)
    save_checkpoint(ckpt_dir / "final.params", params, opt, epochs - 1)
    summary = {"epochs": epochs, "checkpoint": str(ckpt_dir / "final.params")}
    if splits.get("test"):
        summary["test"] = evaluate(splits["test"], cfg.model, params, cfg.head, cfg.seed, 1)
    _emit(summary)
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    params = load_checkpoint(args.checkpoint, cfg.model, cfg.seed)
    data = load_splits(cfg).get(args.split)
    if not data:
        raise UsageError(f"split {args.split!r} is empty or missing")
    report = evaluate(data, cfg.model, params, cfg.head, cfg.seed, args.repeats, split=args.split)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / f"eval_{args.split}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit(report)
    return EXIT_OK


def verify_sampler(m: int, k: int, trials: int, seed: int, vectors: int = 10) -> dict:
    """Marginal, partition, sampling (chi-squared) and gradient oracles for one (m, k)."""
    from .oracles import check_sampler

    return check_sampler(m, k, trials, seed, vectors)


def cmd_verify_sampler(args) -> int:
    if not (1 <= args.k <= args.m):
        raise UsageError(f"need 1 <= k <= m, got m={args.m}, k={args.k}")
    if args.m > 12:
        raise UsageError("enumeration oracles need m <= 12")
    if args.trials < 1:
        raise UsageError("trials must be positive")
    report = verify_sampler(args.m, args.k, args.trials, args.seed, args.vectors)
    _emit(report)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_diagnose(cfg: ExperimentConfig, args) -> int:
    from .metrics import diagnose_graphs

    params = load_checkpoint(args.checkpoint, cfg.model, cfg.seed) if args.checkpoint else init_params(cfg.model, cfg.seed)
    data = load_splits(cfg).get(args.split) or []
    report = diagnose_graphs(data[: args.limit], cfg.model, params, cfg.seed, sensitivity=not args.no_sensitivity)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / f"diagnose_{args.split}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit(report["summary"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iprmpnn", description=__doc__.split("\n\n")[0])
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON experiment config")
        return sp

    g = with_config(sub.add_parser("gen", help="generate dataset files"))
    g.add_argument("--force", action="store_true")
    t = with_config(sub.add_parser("train", help="train a model"))
    t.add_argument("--force", action="store_true")
    t.add_argument("--resume", help="checkpoint to continue from")
    e = with_config(sub.add_parser("eval", help="evaluate a checkpoint"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--repeats", type=int, default=5)
    e.add_argument("--split", default="test", choices=SPLITS)
    v = sub.add_parser("verify-sampler", help="run the exactly-k oracle suite")
    v.add_argument("--m", type=int, required=True)
    v.add_argument("--k", type=int, required=True)
    v.add_argument("--trials", type=int, default=100_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--vectors", type=int, default=10)
    d = with_config(sub.add_parser("diagnose", help="resistance and sensitivity report"))
    d.add_argument("--checkpoint")
    d.add_argument("--split", default="test", choices=SPLITS)
    d.add_argument("--limit", type=int, default=50)
    d.add_argument("--no-sensitivity", action="store_true")
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
        with threadpool_limits(limits=args.threads):
            if args.command == "verify-sampler":
                if extra:
                    raise UsageError(f"unexpected arguments: {extra}")
                return cmd_verify_sampler(args)
            cfg = load_config(args.config, extra, need_model=args.command != "gen")
            handler = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose}[args.command]
            return handler(cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DatasetError, GraphError, ExactKError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
