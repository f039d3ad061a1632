"""Weight-distribution statistics, outlier reports and trainable-ratio tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .model import LN_ATT, LN_FFN, TAGS, count_params
from .selection import (
    BITFIT,
    FREEZE,
    FULL_FT,
    LAYER_NORMS,
    LAYER_NORMS_ATT,
    LAYER_NORMS_FFN,
    OUTLIER_LN,
    RAND,
    REGIME_FEED_FORWARD,
    REGIME_MULTI_HEAD,
    SINGLE_LAYER_LN,
    SelectionSpec,
    block_norms,
    mask_stats,
    resolve,
    select_outliers,
)

# pooled view over both block LayerNorms
LAYER_NORM_POOLED = "LayerNorm"
BIMODAL_THRESHOLD = 5.0 / 9.0
DEFAULT_SAMPLE = 10_000
OUTLIER_NS = (4, 16, 64, 256)
TABLE_REGIMES = (FULL_FT, FREEZE, REGIME_MULTI_HEAD, REGIME_FEED_FORWARD, LAYER_NORMS,
                 LAYER_NORMS_ATT, LAYER_NORMS_FFN, BITFIT, RAND)


@dataclass
class Moments:
    n: int
    mean: float
    std: float
    min: float
    max: float

    @classmethod
    def of(cls, x):
        if x.size == 0:
            return cls(0, float("nan"), float("nan"), float("nan"), float("nan"))
        return cls(int(x.size), float(x.mean()), float(x.std()), float(x.min()), float(x.max()))


@dataclass
class ModuleStats:
    module_tag: str
    sample_size: int
    mean: float
    std: float
    min: float
    max: float
    bin_edges: list
    counts: list
    trimmed: int
    bimodality_coefficient: float
    bimodal: bool
    subgroups: dict

    def as_dict(self):
        return asdict(self)


def bimodality_coefficient(x):
    """(skewness^2 + 1) / kurtosis with plain (biased) moments; NaN for constant samples."""
    x = np.asarray(x, dtype=np.float64)
    d = x - x.mean()
    m2 = float(np.mean(d * d))
    if m2 == 0.0:
        return float("nan")
    skew = float(np.mean(d**3)) / m2**1.5
    kurt = float(np.mean(d**4)) / m2**2
    return (skew * skew + 1.0) / kurt


def trim_outliers(x, k=3.0):
    """Drop values farther than ``k`` IQRs from the median."""
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    return x[np.abs(x - med) <= k * iqr]


def _population(model, tag):
    if tag == LAYER_NORM_POOLED:
        tags = {LN_ATT, LN_FFN}
    elif tag in TAGS:
        tags = {tag}
    else:
        raise ValueError(f"unknown tag {tag!r}")
    groups = [g for g in model.registry if g.tag in tags]
    if not groups:
        raise ValueError(f"no parameters tagged {tag!r}")
    return groups


def module_weight_stats(model, tag, sample_size=DEFAULT_SAMPLE, seed=0, trim=True, bins=50):
    """Statistics of a seeded uniform sample (without replacement) of one module's weights.

    The sample is drawn over the concatenation of the module's tensors in
    registry order. Moments and the bimodality coefficient use the full
    sample; the histogram uses the trimmed sample when ``trim`` is set. The
    sample is capped at the population size.
    """
    groups = _population(model, tag)
    values = np.concatenate([g.values for g in groups])
    kind = np.concatenate([
        np.full(g.size, 1 if g.name.endswith(".gamma") else (2 if g.name.endswith(".beta") else 0))
        for g in groups
    ])
    n = min(sample_size, values.size)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(values.size, size=n, replace=False))
    sample = values[idx]
    shown = trim_outliers(sample) if trim else sample
    counts, edges = np.histogram(shown, bins=bins)
    b = bimodality_coefficient(sample)
    subgroups = {}
    if tag in (LAYER_NORM_POOLED, LN_ATT, LN_FFN):
        sk = kind[idx]
        subgroups = {
            "gamma": asdict(Moments.of(sample[sk == 1])),
            "beta": asdict(Moments.of(sample[sk == 2])),
            "pooled": asdict(Moments.of(sample)),
        }
    return ModuleStats(
        module_tag=tag,
        sample_size=int(n),
        mean=float(sample.mean()),
        std=float(sample.std()),
        min=float(sample.min()),
        max=float(sample.max()),
        bin_edges=edges.tolist(),
        counts=counts.astype(int).tolist(),
        trimmed=int(n - shown.size),
        bimodality_coefficient=b,
        bimodal=bool(b > BIMODAL_THRESHOLD),
        subgroups=subgroups,
    )


@dataclass
class NormOutliers:
    norm: str
    indices: list
    values: list
    deviations: list

    def as_dict(self):
        return asdict(self)


def outlier_report(model, n):
    """Per block norm, the pooled gamma+beta entries farthest from the mean, largest first.

    Indices address the pooled vector: ``i < H`` is ``gamma[i]``, else ``beta[i - H]``.
    """
    out = []
    for prefix, gamma, beta in block_norms(model.registry):
        pooled = np.concatenate([gamma.values, beta.values])
        idx = select_outliers(pooled, n)
        dev = np.abs(pooled[idx] - math.fsum(pooled) / pooled.size)
        order = np.lexsort((idx, -dev))
        idx, dev = idx[order], dev[order]
        out.append(NormOutliers(prefix, idx.tolist(), pooled[idx].tolist(), dev.tolist()))
    return out


@dataclass
class RatioRow:
    regime: str
    encoder_trainable: int
    trainable: int
    total: int
    ratio: float

    @property
    def percent(self):
        return 100.0 * self.ratio

    def as_dict(self):
        return {**asdict(self), "percent": self.percent}


def ratio_table(registry, outlier_ns=OUTLIER_NS, single_layers=None, rand_seed=0):
    """Exact trainable counts per regime.

    ``ratio`` is encoder-trainable over the full model count (head included in
    the denominator); ``trainable`` adds the classifier head.
    """
    ln_count = count_params(registry, lambda g: g.tag in (LN_ATT, LN_FFN)).selected
    num_layers = 1 + max(g.layer for g in registry if g.layer is not None)
    specs = []
    for regime in TABLE_REGIMES:
        if regime == RAND:
            specs.append(SelectionSpec(RAND, rand_budget=ln_count, rand_seed=rand_seed))
        else:
            specs.append(SelectionSpec(regime))
    specs += [SelectionSpec(OUTLIER_LN, n_outliers=n) for n in outlier_ns]
    layers = range(num_layers) if single_layers is None else single_layers
    specs += [SelectionSpec(SINGLE_LAYER_LN, layers={i}) for i in layers]
    rows = []
    for spec in specs:
        s = mask_stats(resolve(spec, registry), registry)
        rows.append(RatioRow(spec.label(), s.encoder_trainable, s.trainable, s.total,
                             s.encoder_trainable / s.total))
    return rows


def format_ratio_table(rows):
    lines = [f"{'regime':<22}{'encoder':>12}{'with head':>12}{'ratio %':>12}"]
    for r in rows:
        lines.append(f"{r.regime:<22}{r.encoder_trainable:>12,}{r.trainable:>12,}{r.percent:>12.4g}")
    return "\n".join(lines)


def write_histogram_csv(stats, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(stats.bin_edges[:-1], stats.bin_edges[1:], stats.counts):
            w.writerow([repr(lo), repr(hi), c])


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
