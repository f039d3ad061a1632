"""Command-line front end: pretrain, finetune, sweep, benchmark, analyze."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

from . import analysis
from .config import ConfigFileError, load_config
from .experiments import FromCheckpoint, benchmark_specs, format_benchmark, pretrain, run_benchmark
from .model import (CheckpointFormatError, CheckpointMismatchError, ConfigError, build_model,
                    describe_registry, read_checkpoint, save_checkpoint)
from .selection import SelectionError
from .tasks import TaskError, gen_downstream
from .trainer import sweep, train

log = logging.getLogger("modtune")

SUMMARY_COLUMNS = ("task", "regime", "layers", "n_outliers", "lr", "seed", "epoch_best",
                   "metric_name", "metric_value", "trainable", "total", "ratio", "status")

USER_ERRORS = (ConfigFileError, ConfigError, CheckpointFormatError, CheckpointMismatchError,
               SelectionError, TaskError, FileNotFoundError)


class UsageError(ValueError):
    pass


def blob_hash(path):
    """Git-style content hash (sha1 over ``blob <size>\\0`` + bytes)."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _out_dir(args, cfg):
    out = args.out or cfg.get("io.out_dir") or os.path.join("runs", args.command)
    os.makedirs(out, exist_ok=True)
    return out


def _existing_checkpoint(cfg):
    cfg.require("io.checkpoint")
    path = cfg.get("io.checkpoint")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def _write_manifest(out, cfg, command, seeds, checkpoint=None, status="ok", extra=None):
    with open(os.path.join(out, "config.txt"), "wb") as fh:
        fh.write(cfg.raw)
    manifest = {
        "command": command,
        "config_hash": cfg.hash,
        "checkpoint": checkpoint,
        "checkpoint_hash": blob_hash(checkpoint) if checkpoint and os.path.isfile(checkpoint) else None,
        "seeds": list(seeds),
        "status": status,
    }
    manifest.update(extra or {})
    analysis.write_json(manifest, os.path.join(out, "manifest.json"))


def _summary_row(report):
    spec = report.spec
    return {
        "task": report.task,
        "regime": spec["regime"],
        "layers": " ".join(map(str, spec["layers"])) if spec["layers"] else "",
        "n_outliers": "" if spec["n_outliers"] is None else spec["n_outliers"],
        "lr": repr(report.lr),
        "seed": report.seed,
        "epoch_best": "" if report.best_epoch is None else report.best_epoch,
        "metric_name": report.metric_name,
        "metric_value": "" if report.best_metric is None else repr(report.best_metric),
        "trainable": report.trainable,
        "total": report.total,
        "ratio": repr(report.ratio),
        "status": report.status,
    }


def _write_reports(out, reports):
    with open(os.path.join(out, "reports.jsonl"), "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.metric_fields(), sort_keys=True) + "\n")
    with open(os.path.join(out, "timings.jsonl"), "w") as fh:
        for r in reports:
            fh.write(json.dumps({"config_hash": r.config_hash, "wall_clock": r.wall_clock}) + "\n")
    with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(_summary_row(r))


def _seeds(cfg, args):
    return cfg.train_config(args.seed).seeds


def _downstream(cfg, model_cfg, kind=None):
    spec = cfg.task_spec(kind, vocab_size=model_cfg.vocab_size)
    if spec.kind == "pretrain-mlm":
        raise UsageError("task.kind must be a downstream task for this command")
    return gen_downstream(spec)


def _model_for(dataset, cfg):
    num = dataset.num_labels if dataset.label_kind != "float" else 1
    return cfg.model_config(num_classes=num)


def cmd_pretrain(args, cfg):
    cfg.require("io.checkpoint")
    kinds = cfg.task_kinds()
    if "task.kind" in cfg and kinds != ("pretrain-mlm",):
        raise UsageError("pretrain needs task.kind = pretrain-mlm")
    out = _out_dir(args, cfg)
    tc = cfg.train_config(args.seed)
    model_cfg = cfg.model_config()
    spec = cfg.task_spec("pretrain-mlm", vocab_size=model_cfg.vocab_size)
    seed = tc.seeds[0]
    model, report = pretrain(model_cfg, spec, tc, tc.peak_lr, seed)
    ckpt = cfg.get("io.checkpoint")
    os.makedirs(os.path.dirname(os.path.abspath(ckpt)), exist_ok=True)
    save_checkpoint(model, ckpt)
    _write_reports(out, [report])
    _write_manifest(out, cfg, "pretrain", [seed], ckpt, report.status)
    log.info("pretrain %s: dev %s = %s", report.status, report.metric_name, report.epoch_metrics)
    return [report]


def cmd_finetune(args, cfg):
    ckpt = _existing_checkpoint(cfg)
    out = _out_dir(args, cfg)
    tc = cfg.train_config(args.seed)
    spec = cfg.selection_spec()
    ds = _downstream(cfg, cfg.model_config())
    factory = FromCheckpoint(ckpt, _model_for(ds, cfg), ds.head())
    factory(tc.seeds[0])  # surface checkpoint/config mismatches before training
    reports = []
    os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    for seed in tc.seeds:
        model = factory(seed)
        r = train(model, ds, spec, tc, tc.peak_lr, seed)
        save_checkpoint(model, os.path.join(out, "checkpoints", f"seed{seed}.mwt"))
        reports.append(r)
    _write_reports(out, reports)
    status = "ok" if all(r.ok for r in reports) else "failed"
    _write_manifest(out, cfg, "finetune", tc.seeds, ckpt, status)
    return reports


def cmd_sweep(args, cfg):
    ckpt = _existing_checkpoint(cfg)
    out = _out_dir(args, cfg)
    tc = cfg.train_config(args.seed)
    spec = cfg.selection_spec()
    ds = _downstream(cfg, cfg.model_config())
    factory = FromCheckpoint(ckpt, _model_for(ds, cfg), ds.head())
    factory(tc.seeds[0])
    result = sweep(factory, ds, spec, tc, args.jobs)
    _write_reports(out, result.grid)
    extra = {"best_lr": result.best_lr, "mean": result.mean, "std": result.std,
             "per_lr": {repr(k): list(v) for k, v in result.per_lr.items()}}
    status = "ok" if not result.failed else "failed"
    _write_manifest(out, cfg, "sweep", tc.seeds, ckpt, status, extra)
    return result.grid


def cmd_benchmark(args, cfg):
    ckpt = _existing_checkpoint(cfg)
    out = _out_dir(args, cfg)
    tc = cfg.train_config(args.seed)
    base_cfg = cfg.model_config()
    reports, tables = [], {}
    for kind in cfg.task_kinds():
        ds = _downstream(cfg, base_cfg, kind)
        factory = FromCheckpoint(ckpt, _model_for(ds, cfg), ds.head())
        registry = factory(tc.seeds[0]).registry
        rows = run_benchmark(factory, ds, benchmark_specs(registry, rand_seed=cfg.get("rand_seed", 0)),
                             tc, args.jobs)
        text = format_benchmark(rows, ds.metric)
        failed = [r for row in rows for r in row.result.failed]
        if failed:
            text += "\n" + "\n".join(
                f"* failed: {r.spec['regime']} lr={r.lr:g} seed={r.seed}: {r.diagnostic}" for r in failed)
        tables[kind] = [{"regime": row.label, "mean": row.result.mean, "std": row.result.std,
                         "best_lr": row.result.best_lr, "trainable": row.trainable,
                         "encoder_trainable": row.encoder_trainable, "total": row.total,
                         "ratio": row.ratio, "failed_runs": len(row.result.failed)} for row in rows]
        with open(os.path.join(out, f"table_{kind}.txt"), "w") as fh:
            fh.write(text + "\n")
        print(f"== {kind}\n{text}")
        for row in rows:
            reports.extend(row.result.grid)
    _write_reports(out, reports)
    analysis.write_json(tables, os.path.join(out, "table.json"))
    status = "ok" if all(r.ok for r in reports) else "failed"
    _write_manifest(out, cfg, "benchmark", tc.seeds, ckpt, status)
    return reports


def model_from_checkpoint(path, cfg):
    """Rebuild whatever model a checkpoint holds (head kind inferred from the head shape)."""
    state = read_checkpoint(path)
    if "head.weight" not in state:
        raise CheckpointMismatchError(f"{path}: missing tensor 'head.weight'")
    outputs = state["head.weight"].shape[1]
    head = "regress" if outputs == 1 else "classify"
    model = build_model(cfg.model_config(num_classes=outputs), head, seed=0)
    model.load_state(state)
    return model


def cmd_analyze(args, cfg):
    ckpt = _existing_checkpoint(cfg)
    out = _out_dir(args, cfg)
    model = model_from_checkpoint(ckpt, cfg)
    sample = cfg.get("analyze.sample_size", analysis.DEFAULT_SAMPLE)
    seed = args.seed if args.seed is not None else cfg.get("analyze.seed", 0)
    stats = {}
    for tag in ("MultiHead", "FeedForward", "LN_Att", "LN_FFN", analysis.LAYER_NORM_POOLED):
        s = analysis.module_weight_stats(model, tag, sample, seed)
        stats[tag] = s.as_dict()
        analysis.write_histogram_csv(s, os.path.join(out, f"hist_{tag}.csv"))
    analysis.write_json(stats, os.path.join(out, "stats.json"))
    n = cfg.get("analyze.n_outliers", 4)
    analysis.write_json([o.as_dict() for o in analysis.outlier_report(model, n)],
                        os.path.join(out, "outliers.json"))
    # count against the downstream head when one is configured, else the checkpoint's own
    registry = model.registry
    if cfg.task_kinds()[0] != "pretrain-mlm":
        ds = _downstream(cfg, cfg.model_config())
        registry = describe_registry(_model_for(ds, cfg), ds.head())
    rows = analysis.ratio_table(registry, rand_seed=cfg.get("rand_seed", 0))
    analysis.write_json([r.as_dict() for r in rows], os.path.join(out, "ratio_table.json"))
    with open(os.path.join(out, "ratio_table.txt"), "w") as fh:
        fh.write(analysis.format_ratio_table(rows) + "\n")
    _write_manifest(out, cfg, "analyze", [seed], ckpt)
    return []


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sweep": cmd_sweep,
    "benchmark": cmd_benchmark,
    "analyze": cmd_analyze,
}


def build_parser():
    p = argparse.ArgumentParser(prog="modtune", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="key = value run configuration")
        s.add_argument("--out", help="output directory (default: io.out_dir or runs/<command>)")
        s.add_argument("--seed", type=int, help="run a single seed instead of train.seeds")
        s.add_argument("--jobs", type=int, default=1, help="parallel runs for sweep/benchmark")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        reports = COMMANDS[args.command](args, cfg)
    except (UsageError, *USER_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    failed = [r for r in reports if not r.ok]
    for r in failed:
        print(f"failed run: {r.spec['regime']} lr={r.lr:g} seed={r.seed}: {r.diagnostic}",
              file=sys.stderr)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
