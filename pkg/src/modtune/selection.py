"""Declarative selection regimes resolved to exact per-tensor train masks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .model import (
    BIAS,
    CLASSIFIER,
    FEED_FORWARD,
    LN_ATT,
    LN_FFN,
    MULTI_HEAD,
)

FULL_FT = "FullFT"
FREEZE = "Freeze"
REGIME_MULTI_HEAD = "MultiHead"
REGIME_FEED_FORWARD = "FeedForward"
LAYER_NORMS = "LayerNorms"
LAYER_NORMS_ATT = "LayerNormsAtt"
LAYER_NORMS_FFN = "LayerNormsFFN"
BITFIT = "BitFit"
RAND = "Rand"
OUTLIER_LN = "OutlierLN"
SINGLE_LAYER_LN = "SingleLayerLN"

REGIMES = (FULL_FT, FREEZE, REGIME_MULTI_HEAD, REGIME_FEED_FORWARD, LAYER_NORMS,
           LAYER_NORMS_ATT, LAYER_NORMS_FFN, BITFIT, RAND, OUTLIER_LN, SINGLE_LAYER_LN)

_TAGGED = {
    REGIME_MULTI_HEAD: {MULTI_HEAD},
    REGIME_FEED_FORWARD: {FEED_FORWARD},
    LAYER_NORMS: {LN_ATT, LN_FFN},
    LAYER_NORMS_ATT: {LN_ATT},
    LAYER_NORMS_FFN: {LN_FFN},
}

ALL = "all"
NONE = "none"


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionSpec:
    regime: str
    layers: frozenset | None = None
    n_outliers: int | None = None
    rand_budget: int | None = None
    rand_seed: int = 0
    include_classifier: bool = True

    def __post_init__(self):
        if self.layers is not None and not isinstance(self.layers, frozenset):
            object.__setattr__(self, "layers", frozenset(int(i) for i in self.layers))
        self.validate()

    def validate(self):
        if self.regime not in REGIMES:
            raise SelectionError(f"unknown regime {self.regime!r}")
        if (self.n_outliers is not None) != (self.regime == OUTLIER_LN):
            raise SelectionError("n_outliers is required for, and only for, OutlierLN")
        if (self.rand_budget is not None) != (self.regime == RAND):
            raise SelectionError("rand_budget is required for, and only for, Rand")
        if (self.layers is not None) != (self.regime == SINGLE_LAYER_LN):
            raise SelectionError("layers is required for, and only for, SingleLayerLN")
        if self.n_outliers is not None and self.n_outliers < 1:
            raise SelectionError("n_outliers must be >= 1")
        if self.rand_budget is not None and self.rand_budget < 1:
            raise SelectionError("rand_budget must be >= 1")
        if self.layers is not None and not self.layers:
            raise SelectionError("layers must not be empty")

    def label(self):
        if self.regime == OUTLIER_LN:
            return f"{self.regime}(n={self.n_outliers})"
        if self.regime == SINGLE_LAYER_LN:
            return f"{self.regime}({','.join(map(str, sorted(self.layers)))})"
        if self.regime == RAND:
            return f"{self.regime}({self.rand_budget})"
        return self.regime

    def as_dict(self):
        return {
            "regime": self.regime,
            "layers": sorted(self.layers) if self.layers is not None else None,
            "n_outliers": self.n_outliers,
            "rand_budget": self.rand_budget,
            "rand_seed": self.rand_seed,
            "include_classifier": self.include_classifier,
        }


class TrainMask:
    """Per-group entry: ``"all"``, ``"none"`` or a sorted int64 index array."""

    def __init__(self, entries):
        self.entries = dict(entries)

    def __getitem__(self, name):
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries.items())

    def __eq__(self, other):
        if not isinstance(other, TrainMask) or self.entries.keys() != other.entries.keys():
            return False
        for k, a in self.entries.items():
            b = other.entries[k]
            if isinstance(a, str) or isinstance(b, str):
                if not (isinstance(a, str) and isinstance(b, str) and a == b):
                    return False
            elif not np.array_equal(a, b):
                return False
        return True

    def entry_size(self, name, size):
        e = self.entries[name]
        if isinstance(e, str):
            return size if e == ALL else 0
        return len(e)

    def trainable_count(self, registry):
        return sum(self.entry_size(g.name, g.size) for g in registry)

    def selected_indices(self, name, size):
        e = self.entries[name]
        if isinstance(e, str):
            return np.arange(size) if e == ALL else np.empty(0, dtype=np.int64)
        return e

    def frozen_positions(self, name, size):
        """Boolean mask over the flat tensor: True where updates are forbidden."""
        frozen = np.ones(size, dtype=bool)
        frozen[self.selected_indices(name, size)] = False
        return frozen


def select_outliers(values, n):
    """Indices of the ``min(n, len)`` entries farthest from the mean, sorted ascending.

    Ties in absolute deviation go to the lower index.
    """
    if n < 1:
        raise SelectionError("n must be >= 1")
    t = np.asarray(values, dtype=np.float64).reshape(-1)
    if t.size == 0:
        return np.empty(0, dtype=np.int64)
    mean = math.fsum(t) / t.size
    dev = np.abs(t - mean)
    order = np.argsort(-dev, kind="stable")
    return np.sort(order[:min(n, t.size)]).astype(np.int64)


def block_norms(registry):
    """``[(prefix, gamma_group, beta_group)]`` for every block LayerNorm, registry order."""
    by_name = {g.name: g for g in registry}
    norms = []
    for g in registry:
        if g.tag in (LN_ATT, LN_FFN) and g.name.endswith(".gamma"):
            prefix = g.name[: -len(".gamma")]
            norms.append((prefix, g, by_name[prefix + ".beta"]))
    return norms


def apply_outlier_regime(registry, n, include_classifier=True):
    """Per block norm, pool gamma and beta and keep the ``n`` farthest-from-mean entries."""
    if n < 1:
        raise SelectionError("n must be >= 1")
    entries = {g.name: NONE for g in registry}
    for _, gamma, beta in block_norms(registry):
        pooled = np.concatenate([gamma.values, beta.values])
        idx = select_outliers(pooled, n)
        H = gamma.size
        entries[gamma.name] = idx[idx < H]
        entries[beta.name] = idx[idx >= H] - H
    _set_classifier(entries, registry, include_classifier)
    return TrainMask(entries)


def _set_classifier(entries, registry, include):
    for g in registry:
        if g.tag == CLASSIFIER:
            entries[g.name] = ALL if include else NONE


def _num_layers(registry):
    layers = [g.layer for g in registry if g.layer is not None]
    return max(layers) + 1 if layers else 0


def _rand_entries(registry, budget, seed):
    pool = [g for g in registry if g.tag != CLASSIFIER]
    sizes = np.array([g.size for g in pool], dtype=np.int64)
    total = int(sizes.sum())
    if budget > total:
        raise SelectionError(f"rand_budget {budget} exceeds the {total} non-classifier parameters")
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(total, size=budget, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    cuts = np.searchsorted(flat, offsets)
    entries = {}
    for i, g in enumerate(pool):
        idx = flat[cuts[i]:cuts[i + 1]] - offsets[i]
        entries[g.name] = idx.astype(np.int64) if idx.size else NONE
    return entries


def resolve(spec, registry):
    """Resolve a :class:`SelectionSpec` against a registry into a :class:`TrainMask`."""
    spec.validate()
    r = spec.regime
    if r == OUTLIER_LN:
        return apply_outlier_regime(registry, spec.n_outliers, spec.include_classifier)

    entries = {g.name: NONE for g in registry}
    if r == FULL_FT:
        entries = {g.name: ALL for g in registry}
    elif r in _TAGGED:
        tags = _TAGGED[r]
        for g in registry:
            if g.tag in tags:
                entries[g.name] = ALL
    elif r == BITFIT:
        for g in registry:
            if g.is_bias and g.tag in (MULTI_HEAD, FEED_FORWARD):
                entries[g.name] = ALL
    elif r == SINGLE_LAYER_LN:
        L = _num_layers(registry)
        bad = sorted(i for i in spec.layers if not 0 <= i < L)
        if bad:
            raise SelectionError(f"layer index {bad[0]} out of range [0, {L})")
        for g in registry:
            if g.tag in (LN_ATT, LN_FFN) and g.layer in spec.layers:
                entries[g.name] = ALL
    elif r == RAND:
        entries.update(_rand_entries(registry, spec.rand_budget, spec.rand_seed))

    if r != FULL_FT:
        _set_classifier(entries, registry, spec.include_classifier)
    return TrainMask(entries)


class MaskStats(NamedTuple):
    trainable: int
    total: int
    ratio: float
    encoder_trainable: int
    breakdown: dict

    @property
    def percent(self):
        return 100.0 * self.ratio

    @property
    def encoder_percent(self):
        return 100.0 * self.encoder_trainable / self.total if self.total else 0.0


def _breakdown_tag(g):
    if g.tag in (MULTI_HEAD, FEED_FORWARD) and g.is_bias:
        return BIAS
    return g.tag


def mask_stats(mask, registry):
    """Exact trainable counts, ratio against the full model (head included) and per-tag rows.

    Biases of attention/FFN maps are broken out under ``Bias``.
    """
    names = [g.name for g in registry]
    if set(names) != set(mask.entries):
        raise SelectionError("mask was resolved against a different registry")
    breakdown = {}
    trainable = encoder = total = 0
    for g in registry:
        e = mask.entries[g.name]
        if not isinstance(e, str) and e.size and (e[0] < 0 or e[-1] >= g.size):
            raise SelectionError(f"mask indices out of bounds for {g.name}")
        k = mask.entry_size(g.name, g.size)
        total += g.size
        trainable += k
        if g.tag != CLASSIFIER:
            encoder += k
        if k:
            tag = _breakdown_tag(g)
            breakdown[tag] = breakdown.get(tag, 0) + k
    return MaskStats(trainable, total, trainable / total if total else 0.0, encoder, breakdown)


def spec_from_mapping(values):
    """Build a spec from config-file style keys (``regime``, ``layers``, ...)."""
    layers = values.get("layers")
    if isinstance(layers, str):
        layers = [int(x) for x in layers.replace(",", " ").split()]
    return SelectionSpec(
        regime=values["regime"],
        layers=frozenset(layers) if layers is not None else None,
        n_outliers=int(values["n_outliers"]) if values.get("n_outliers") is not None else None,
        rand_budget=int(values["rand_budget"]) if values.get("rand_budget") is not None else None,
        rand_seed=int(values.get("rand_seed", 0)),
        include_classifier=bool(values.get("include_classifier", True)),
    )

