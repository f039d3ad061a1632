"""Pre-train, then fine-tune one downstream task under every selection regime."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .analysis import OUTLIER_NS, TABLE_REGIMES
from .model import LN_ATT, LN_FFN, build_model, count_params, load_encoder
from .selection import OUTLIER_LN, RAND, SelectionSpec, mask_stats, resolve
from .tasks import gen_pretrain
from .trainer import sweep, train

log = logging.getLogger(__name__)

# toy-scale reference run: MLM pre-training, then pair-classify fine-tuning
TOY_BENCHMARK = {
    "pretrain_task": {"size": 20_000, "dev_size": 1000, "seed": 7},
    "pretrain_train": {"epochs": 5, "batch_size": 16},
    "pretrain_lr": 1e-3,
    "finetune_task": {"size": 800, "dev_size": 1000, "seed": 11},
    "finetune_train": {"epochs": 8, "batch_size": 16},
}


def pretrain(config, spec, tc, lr, seed=0):
    """MLM pre-training with every parameter trainable; returns (model, report)."""
    corpus = gen_pretrain(spec)
    model = build_model(config.replace(num_classes=spec.vocab_size), "tag", seed)
    report = train(model, corpus, SelectionSpec("FullFT"), tc, lr, seed, task=corpus.name)
    return model, report


class FromCheckpoint:
    """Picklable model factory: pre-trained encoder plus a head seeded by the run seed."""

    def __init__(self, path, config, head="classify"):
        self.path = str(path)
        self.config = config
        self.head = head

    def __call__(self, seed):
        return load_encoder(self.path, build_model(self.config, self.head, seed))


class FromScratch:
    def __init__(self, config, head="classify", init_seed=0):
        self.config = config
        self.head = head
        self.init_seed = init_seed

    def __call__(self, seed):
        m = build_model(self.config, self.head, self.init_seed)
        return m.with_head(self.head, seed=seed)


def layer_norm_budget(registry):
    return count_params(registry, lambda g: g.tag in (LN_ATT, LN_FFN)).selected


def benchmark_specs(registry, regimes=TABLE_REGIMES, outlier_ns=OUTLIER_NS, rand_seed=0):
    """Specs in table order; Rand gets the LayerNorm budget."""
    specs = []
    for regime in regimes:
        if regime == RAND:
            specs.append(SelectionSpec(RAND, rand_budget=layer_norm_budget(registry),
                                       rand_seed=rand_seed))
        else:
            specs.append(SelectionSpec(regime))
    specs += [SelectionSpec(OUTLIER_LN, n_outliers=n) for n in outlier_ns]
    return specs


@dataclass
class BenchmarkRow:
    spec: SelectionSpec
    result: object
    trainable: int
    encoder_trainable: int
    total: int

    @property
    def label(self):
        return self.spec.label()

    @property
    def ratio(self):
        return self.encoder_trainable / self.total


def run_benchmark(factory, dataset, specs, tc, jobs=1):
    registry = factory(tc.seeds[0]).registry
    rows = []
    for spec in specs:
        s = mask_stats(resolve(spec, registry), registry)
        log.info("benchmark %s (%d trainable)", spec.label(), s.trainable)
        result = sweep(factory, dataset, spec, tc, jobs)
        rows.append(BenchmarkRow(spec, result, s.trainable, s.encoder_trainable, s.total))
    return rows


def format_benchmark(rows, metric_name="metric"):
    head = f"{'regime':<22}{metric_name:>18}{'best lr':>10}{'ratio %':>12}"
    lines = [head]
    for r in rows:
        res = r.result
        if res.mean is None:
            score = "failed"
            lr = "-"
        else:
            score = f"{100 * res.mean:.2f} ± {100 * res.std:.2f}"
            lr = f"{res.best_lr:g}"
        lines.append(f"{r.label:<22}{score:>18}{lr:>10}{100 * r.ratio:>12.4g}")
    return "\n".join(lines)
