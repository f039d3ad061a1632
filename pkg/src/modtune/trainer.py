"""Masked-update Adam, warmup/decay schedule, single runs and seed/lr sweeps."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .metrics import IGNORE, compute_metric
from .selection import ALL, mask_stats, resolve
from .tasks import collate

log = logging.getLogger(__name__)

PAPER_LR_SWEEP = (1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2)
# epochs per task size, and for full fine-tuning
EPOCHS_SMALL_TASK = 20
EPOCHS_LARGE_TASK = 10
EPOCHS_FULL_FT = 5


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-4
    lr_sweep: tuple = PAPER_LR_SWEEP
    epochs: int = 3
    batch_size: int = 16
    warmup_ratio: float = 0.10
    adam_eps: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    seeds: tuple = (0, 1, 2)
    max_seq_len: int = 128
    eval_train: bool = False

    def validate(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.peak_lr <= 0 or any(lr <= 0 for lr in self.lr_sweep):
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")
        return self

    def as_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["lr_sweep"] = list(d["lr_sweep"])
        d["seeds"] = list(d["seeds"])
        return d


def lr_at(step, total_steps, peak, warmup_ratio):
    """Linear warmup to ``peak`` then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(math.floor(warmup_ratio * total_steps + 0.5))
    if step < warmup:
        return peak * step / warmup
    if total_steps == warmup:
        return peak
    return peak * (total_steps - step) / (total_steps - warmup)


class AdamState:
    """First/second moments kept only for trainable entries."""

    def __init__(self, registry, mask):
        self.t = 0
        self.m = {}
        self.v = {}
        for g in registry:
            k = mask.entry_size(g.name, g.size)
            if k:
                self.m[g.name] = np.zeros(k)
                self.v[g.name] = np.zeros(k)

    def cardinality(self):
        return sum(a.size for a in self.m.values())


def adam_step(registry, mask, state, lr, beta1=0.9, beta2=0.999, eps=1e-6, weight_decay=0.0):
    """One masked Adam update; masked-out entries are never written."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for g in registry:
        if g.name not in state.m:
            continue
        entry = mask[g.name]
        theta = g.tensor.data.reshape(-1)
        grad = g.tensor.grad.reshape(-1)
        m, v = state.m[g.name], state.v[g.name]
        if isinstance(entry, str):
            if m.size != theta.size:
                raise ValueError(f"optimizer state for {g.name} does not match the mask")
            if weight_decay:
                grad = grad + weight_decay * theta
            kernels.adam_dense(theta, np.ascontiguousarray(grad), m, v,
                               lr, beta1, beta2, eps, bc1, bc2)
        else:
            if m.size != entry.size:
                raise ValueError(f"optimizer state for {g.name} does not match the mask")
            if weight_decay:
                grad = grad.copy()
                grad[entry] += weight_decay * theta[entry]
            kernels.adam_sparse(theta, np.ascontiguousarray(grad), entry, m, v,
                                lr, beta1, beta2, eps, bc1, bc2)


def frozen_digest(registry, mask):
    """SHA-256 over the bytes of every masked-out parameter entry."""
    h = hashlib.sha256()
    for g in registry:
        entry = mask[g.name]
        if isinstance(entry, str) and entry == ALL:
            continue
        h.update(g.name.encode())
        flat = g.tensor.data.reshape(-1)
        if isinstance(entry, str):
            h.update(flat.tobytes())
        else:
            h.update(flat[mask.frozen_positions(g.name, g.size)].tobytes())
    return h.hexdigest()


def config_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class RunReport:
    task: str
    spec: dict
    lr: float
    seed: int
    metric_name: str
    epoch_metrics: list
    best_metric: float | None
    best_epoch: int | None
    trainable: int
    total: int
    ratio: float
    config_hash: str
    status: str = "ok"
    diagnostic: str = ""
    train_metrics: list = field(default_factory=list)
    frozen_digest_before: str = ""
    frozen_digest_after: str = ""
    wall_clock: float = 0.0

    @property
    def ok(self):
        return self.status == "ok"

    def metric_fields(self):
        """Everything except timing; identical across re-runs."""
        d = self.as_dict()
        d.pop("wall_clock")
        return d

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def to_json(self):
        return json.dumps(self.as_dict(), sort_keys=True)


def _head_loss(model, batch, label_kind, rng):
    if label_kind == "token":
        flat = batch.labels.reshape(-1)
        rows = np.flatnonzero(flat != IGNORE)
        logits = model.forward(batch.ids, batch.segments, batch.mask, "train", rng, rows=rows)
        return T.softmax_cross_entropy(logits, flat[rows])
    logits = model.forward(batch.ids, batch.segments, batch.mask, "train", rng)
    if label_kind == "float":
        return T.mse_loss(T.reshape(logits, (logits.shape[0],)), batch.labels)
    return T.softmax_cross_entropy(logits, batch.labels)


def predict(model, examples, label_kind, batch_size=64):
    """Eval-mode predictions: class ids, floats, or per-position class lists."""
    out = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        b = collate(chunk, label_kind)
        logits = model.forward(b.ids, b.segments, b.mask, "eval").data
        if label_kind == "token":
            arg = logits.argmax(axis=-1)
            out.extend(arg[j, :len(ex.tokens)].tolist() for j, ex in enumerate(chunk))
        elif label_kind == "float":
            out.extend(logits[:, 0].tolist())
        else:
            out.extend(logits.argmax(axis=-1).tolist())
    return out


def evaluate(model, dataset, split="dev"):
    examples = dataset.split(split)
    preds = predict(model, examples, dataset.label_kind)
    golds = [ex.label for ex in examples]
    return compute_metric(dataset.metric, preds, golds)


def _as_float(m):
    return None if m is None else float(m)


def train(model, dataset, spec, tc, lr, seed, task=None):
    """Fine-tune ``model`` in place under ``spec``; returns a :class:`RunReport`."""
    tc.validate()
    if not dataset.train:
        raise ValueError("empty training set")
    if model.head != dataset.head():
        raise ValueError(f"model head {model.head!r} does not fit a {dataset.label_kind!r} task")
    registry = model.registry
    mask = resolve(spec, registry)
    stats = mask_stats(mask, registry)
    state = AdamState(registry, mask)
    task = task or dataset.name
    chash = config_hash({"task": task, "dataset": dataset.digest(), "spec": spec.as_dict(),
                         "train": tc.as_dict(), "lr": lr, "seed": seed})
    report = RunReport(task=task, spec=spec.as_dict(), lr=lr, seed=seed,
                       metric_name=dataset.metric, epoch_metrics=[], best_metric=None,
                       best_epoch=None, trainable=stats.trainable, total=stats.total,
                       ratio=stats.ratio, config_hash=chash)
    report.frozen_digest_before = frozen_digest(registry, mask)
    start = time.perf_counter()
    rng = np.random.default_rng([seed, 0xF1])
    n = len(dataset.train)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    step = 0
    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            chunk = [dataset.train[i] for i in order[s * tc.batch_size:(s + 1) * tc.batch_size]]
            batch = collate(chunk, dataset.label_kind)
            model.zero_grad()
            try:
                with T.Graph() as graph:
                    loss = _head_loss(model, batch, dataset.label_kind, rng)
                value = loss.item()
            except T.NumericError:
                value = math.nan
            if not math.isfinite(value):
                report.status = "failed"
                report.diagnostic = f"non-finite loss at epoch {epoch} step {s}"
                log.warning("%s %s lr=%g seed=%d: %s", task, spec.label(), lr, seed, report.diagnostic)
                break
            graph.backward(loss)
            adam_step(registry, mask, state, lr_at(step, total_steps, lr, tc.warmup_ratio),
                      tc.adam_beta1, tc.adam_beta2, tc.adam_eps, tc.weight_decay)
            step += 1
        if report.status != "ok":
            break
        try:
            metric = evaluate(model, dataset, "dev")
        except T.NumericError as exc:
            report.status = "failed"
            report.diagnostic = f"non-finite activations at epoch {epoch}: {exc}"
            break
        report.epoch_metrics.append(_as_float(metric))
        if tc.eval_train:
            report.train_metrics.append(_as_float(evaluate(model, dataset, "train")))
    if report.epoch_metrics:
        best = int(np.argmax(report.epoch_metrics))
        report.best_epoch = best
        report.best_metric = report.epoch_metrics[best]
    report.frozen_digest_after = frozen_digest(registry, mask)
    if report.frozen_digest_after != report.frozen_digest_before and report.status == "ok":
        report.status = "failed"
        report.diagnostic = "masked-out parameters changed"
    report.wall_clock = time.perf_counter() - start
    return report


@dataclass
class SweepResult:
    best_lr: float | None
    mean: float | None
    std: float | None
    grid: list
    per_lr: dict
    failed: list

    def best_runs(self):
        return [r for r in self.grid if r.lr == self.best_lr and r.ok]


def _run_one(args):
    model_factory, dataset, spec, tc, lr, seed = args
    return train(model_factory(seed), dataset, spec, tc, lr, seed)


def summarize(grid, lrs):
    """Pick the lr with the best mean dev metric (first in sweep order on ties)."""
    per_lr = {}
    for lr in lrs:
        vals = [r.best_metric for r in grid if r.lr == lr and r.ok and r.best_metric is not None]
        if vals:
            per_lr[lr] = (float(np.mean(vals)), float(np.std(vals)), len(vals))
    best_lr = None
    for lr in lrs:
        if lr in per_lr and (best_lr is None or per_lr[lr][0] > per_lr[best_lr][0]):
            best_lr = lr
    failed = [r for r in grid if not r.ok]
    mean, std = (per_lr[best_lr][:2] if best_lr is not None else (None, None))
    return SweepResult(best_lr, mean, std, grid, per_lr, failed)


def sweep(model_factory, dataset, spec, tc, jobs=1):
    """Train every (lr, seed) pair from the same starting weights.

    ``model_factory(seed)`` must return a fresh model (its own copy of the
    pre-trained encoder plus a seed-initialised head). Std is the population
    std over seeds.
    """
    tc.validate()
    args = [(model_factory, dataset, spec, tc, lr, seed)
            for lr in tc.lr_sweep for seed in tc.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            grid = list(pool.map(_run_one, args))
    else:
        grid = [_run_one(a) for a in args]
    return summarize(grid, list(tc.lr_sweep))

