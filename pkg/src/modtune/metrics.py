"""Evaluation metrics with GLUE conventions."""

import math

import numpy as np
from scipy.stats import rankdata

IGNORE = -100
KINDS = ("accuracy", "mcc", "f1", "pearson", "spearman", "token-accuracy")


def _pair(preds, golds):
    p = np.asarray(preds)
    g = np.asarray(golds)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    return p, g


def accuracy(preds, golds):
    p, g = _pair(preds, golds)
    return float(np.mean(p == g))


def _confusion(p, g):
    p = p.astype(bool)
    g = g.astype(bool)
    tp = int(np.sum(p & g))
    tn = int(np.sum(~p & ~g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    return tp, tn, fp, fn


def mcc(preds, golds):
    """Binary Matthews correlation; 0 when any marginal is empty."""
    p, g = _pair(preds, golds)
    tp, tn, fp, fn = _confusion(p, g)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def f1(preds, golds):
    """F1 of the positive class (label 1)."""
    p, g = _pair(preds, golds)
    tp, _, fp, fn = _confusion(p, g)
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def pearson(x, y):
    a, b = _pair(x, y)
    a = a.astype(np.float64) - np.mean(a)
    b = b.astype(np.float64) - np.mean(b)
    denom = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if denom == 0.0:
        return 0.0
    return min(1.0, max(-1.0, float(np.dot(a, b)) / denom))


def spearman(x, y):
    """Pearson correlation of average ranks (ties share their mean rank)."""
    a, b = _pair(x, y)
    return pearson(rankdata(a, method="average"), rankdata(b, method="average"))


def token_accuracy(preds, golds):
    """Accuracy over all positions whose gold label is not ``IGNORE``."""
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} vs {len(golds)}")
    hit = total = 0
    for p, g in zip(preds, golds):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ValueError("per-sequence length mismatch")
        keep = g != IGNORE
        hit += int(np.sum(p[keep] == g[keep]))
        total += int(keep.sum())
    if total == 0:
        raise ValueError("empty input")
    return hit / total


_DISPATCH = {
    "accuracy": accuracy,
    "mcc": mcc,
    "f1": f1,
    "pearson": pearson,
    "spearman": spearman,
    "token-accuracy": token_accuracy,
}


def compute_metric(kind, preds, golds):
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise ValueError(f"unknown metric {kind!r}; choose from {KINDS}") from None
    return fn(preds, golds)
