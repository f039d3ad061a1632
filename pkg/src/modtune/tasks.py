"""Synthetic transfer tasks, TSV ingestion and batching.

All synthetic tasks draw from one seeded family of probabilistic regular
grammars: a set of hidden automaton states with (partly overlapping) emission
alphabets, and several *variants* that differ only in their transition
structure. Masked-symbol pre-training on this family teaches the encoder to
track states and variants, which is exactly what the downstream tasks ask
about, so pre-trained features transfer.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .metrics import IGNORE

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
FIRST_SYMBOL = 5
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

TASK_KINDS = ("pretrain-mlm", "pair-classify", "single-classify", "pair-regress", "token-tag")
DEFAULT_METRIC = {
    "pretrain-mlm": "token-accuracy",
    "pair-classify": "accuracy",
    "single-classify": "accuracy",
    "pair-regress": "pearson",
    "token-tag": "token-accuracy",
}
MASK_RATE = 0.15


class TaskError(ValueError):
    pass


class Example(NamedTuple):
    tokens: tuple
    segments: tuple
    label: object


@dataclass(frozen=True)
class Dataset:
    name: str
    label_kind: str  # "class" | "float" | "token"
    num_labels: int
    vocab_size: int
    train: tuple
    dev: tuple
    metric: str
    provenance: dict = field(default_factory=dict, compare=False)

    def head(self):
        if self.label_kind == "token":
            return "tag"
        return "regress" if self.label_kind == "float" else "classify"

    def split(self, name):
        return {"train": self.train, "dev": self.dev}[name]

    def rows(self, split):
        for ex in self.split(split):
            label = list(ex.label) if self.label_kind == "token" else ex.label
            yield {"tokens": list(ex.tokens), "segments": list(ex.segments), "label": label}

    @cached_property
    def _digest(self):
        h = hashlib.sha256()
        h.update(f"{self.name}|{self.label_kind}|{self.num_labels}|{self.vocab_size}".encode())
        for split in ("train", "dev"):
            h.update(split.encode())
            for row in self.rows(split):
                h.update(json.dumps(row, separators=(",", ":")).encode())
        return h.hexdigest()

    def digest(self):
        return self._digest

    def to_jsonl(self, path, split="train"):
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.rows(split):
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    size: int = 2000
    dev_size: int = 500
    seed: int = 0
    grammar_seed: int = 1234
    n_states: int = 8
    n_variants: int = 4
    noise: float = 0.05
    min_len: int = 6
    max_len: int = 10
    vocab_size: int = 128
    metric: str | None = None

    def validate(self):
        if self.kind not in TASK_KINDS:
            raise TaskError(f"unknown task kind {self.kind!r}")
        if self.size < 1 or self.dev_size < 1:
            raise TaskError("split sizes must be >= 1")
        if not 0.0 <= self.noise < 0.5:
            raise TaskError("noise must be in [0, 0.5)")
        if not 1 <= self.min_len <= self.max_len:
            raise TaskError("need 1 <= min_len <= max_len")
        if self.n_states < 2 or self.n_variants < 2:
            raise TaskError("need at least 2 states and 2 variants")
        return self

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# ---------------------------------------------------------------- grammar


class GrammarFamily:
    """Variant-specific sparse transitions over states with mostly shared emissions.

    Each variant also favours its own slice of every state's private symbols
    (weight ``DIALECT``), so the variant leaves a trace on individual tokens
    that masked-symbol prediction can pick up.
    """

    SUCCESSORS = 3
    PRIVATE = 12
    SHARED = 3
    DIALECT = 4.0

    def __init__(self, vocab_size=128, n_states=8, n_variants=4, noise=0.05, seed=1234):
        n_symbols = vocab_size - FIRST_SYMBOL
        if n_symbols < n_states * (self.PRIVATE + self.SHARED):
            raise TaskError(
                f"vocab_size={vocab_size} too small for {n_states} states "
                f"({n_states * (self.PRIVATE + self.SHARED) + FIRST_SYMBOL} ids needed)")
        if n_states < self.SUCCESSORS:
            raise TaskError(f"need at least {self.SUCCESSORS} grammar states")
        rng = np.random.default_rng([seed, 0x6A])
        self.vocab_size = vocab_size
        self.n_states = n_states
        self.n_variants = n_variants
        self.noise = noise
        self.n_symbols = n_symbols
        perm = rng.permutation(n_symbols)
        emit = np.zeros((n_states, n_symbols))
        block = self.PRIVATE + self.SHARED
        for q in range(n_states):
            own = perm[q * block:(q + 1) * block]
            emit[q, own] = rng.dirichlet(np.full(block, 2.0))
        # the shared slice of state q is also emitted (less often) by state q+1
        for q in range(n_states):
            shared = perm[q * block + self.PRIVATE:(q + 1) * block]
            nxt = (q + 1) % n_states
            emit[nxt, shared] = emit[q, shared] * 0.5
        emit = np.repeat(emit[None], n_variants, axis=0)
        for q in range(n_states):
            private = perm[q * block:q * block + self.PRIVATE]
            for v, part in enumerate(np.array_split(private, n_variants)):
                emit[v, q, part] *= self.DIALECT
        self.emit = emit / emit.sum(axis=2, keepdims=True)
        self.start = np.zeros((n_variants, n_states))
        self.trans = np.zeros((n_variants, n_states, n_states))
        for v in range(n_variants):
            self.start[v] = rng.dirichlet(np.ones(n_states))
            for q in range(n_states):
                succ = rng.choice(n_states, size=self.SUCCESSORS, replace=False)
                self.trans[v, q, succ] = rng.dirichlet(np.full(self.SUCCESSORS, 2.0))

    @classmethod
    def for_spec(cls, spec):
        return cls(spec.vocab_size, spec.n_states, spec.n_variants, spec.noise, spec.grammar_seed)

    def sample(self, rng, variant, length):
        """Return (token ids, hidden states)."""
        states = np.empty(length, dtype=np.int64)
        toks = np.empty(length, dtype=np.int64)
        q = rng.choice(self.n_states, p=self.start[variant])
        for i in range(length):
            if i:
                q = rng.choice(self.n_states, p=self.trans[variant, q])
            states[i] = q
            if rng.random() < self.noise:
                toks[i] = rng.integers(self.n_symbols)
            else:
                toks[i] = rng.choice(self.n_symbols, p=self.emit[variant, q])
        return toks + FIRST_SYMBOL, states

    def _obs(self, tokens, variant):
        sym = np.asarray(tokens) - FIRST_SYMBOL
        return (1.0 - self.noise) * self.emit[variant][:, sym].T + self.noise / self.n_symbols

    def log_likelihood(self, tokens):
        """log p(tokens | variant) for every variant, via the scaled forward pass."""
        out = np.zeros(self.n_variants)
        for v in range(self.n_variants):
            obs = self._obs(tokens, v)
            alpha = self.start[v] * obs[0]
            ll = 0.0
            for t in range(1, len(obs)):
                s = alpha.sum()
                ll += np.log(s)
                alpha = (alpha / s) @ self.trans[v] * obs[t]
            out[v] = ll + np.log(alpha.sum())
        return out

    def variant_posterior(self, tokens):
        ll = self.log_likelihood(tokens)
        p = np.exp(ll - ll.max())
        return p / p.sum()

    def state_posterior(self, tokens):
        """Marginal p(state_t | tokens), mixing variants by their posterior."""
        n = len(tokens)
        w = self.variant_posterior(tokens)
        total = np.zeros((n, self.n_states))
        for v in range(self.n_variants):
            obs = self._obs(tokens, v)
            A = self.trans[v]
            alpha = np.zeros((n, self.n_states))
            alpha[0] = self.start[v] * obs[0]
            alpha[0] /= alpha[0].sum()
            for t in range(1, n):
                alpha[t] = alpha[t - 1] @ A * obs[t]
                alpha[t] /= alpha[t].sum()
            beta = np.ones((n, self.n_states))
            for t in range(n - 2, -1, -1):
                beta[t] = A @ (obs[t + 1] * beta[t + 1])
                beta[t] /= beta[t].sum()
            post = alpha * beta
            total += w[v] * post / post.sum(axis=1, keepdims=True)
        return total


# ---------------------------------------------------------------- generators


def _single(a):
    toks = (CLS, *a.tolist(), SEP)
    return toks, (0,) * len(toks)


def _pair(a, b):
    toks = (CLS, *a.tolist(), SEP, *b.tolist(), SEP)
    segs = (0,) * (len(a) + 2) + (1,) * (len(b) + 1)
    return toks, segs


def _levenshtein(a, b):
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def edit_similarity(a, b):
    """1 - levenshtein / max length; 1.0 for identical sequences."""
    n = max(len(a), len(b))
    return 1.0 if n == 0 else 1.0 - _levenshtein(a, b) / n


def _mutate(rng, fam, seq, rate):
    out = []
    for tok in seq.tolist():
        r = rng.random()
        if r < rate / 3:
            continue
        if r < 2 * rate / 3:
            out.append(int(rng.integers(fam.n_symbols)) + FIRST_SYMBOL)
        elif r < rate:
            out.extend([tok, int(rng.integers(fam.n_symbols)) + FIRST_SYMBOL])
        else:
            out.append(tok)
    if not out:
        out.append(int(seq[0]))
    return np.asarray(out, dtype=np.int64)


def _mask_tokens(rng, toks, segs):
    content = [i for i, t in enumerate(toks) if t >= FIRST_SYMBOL]
    chosen = [i for i in content if rng.random() < MASK_RATE]
    if not chosen:
        chosen = [content[int(rng.integers(len(content)))]]
    elif len(chosen) == len(content):
        chosen.pop(int(rng.integers(len(chosen))))
    label = [IGNORE] * len(toks)
    masked = list(toks)
    for i in chosen:
        label[i] = toks[i]
        masked[i] = MASK
    return Example(tuple(masked), segs, tuple(label))


def _draw(spec, fam, rng):
    """One example for ``spec.kind``; returns (Example, hidden-variant info)."""
    def length():
        return int(rng.integers(spec.min_len, spec.max_len + 1))

    G = fam.n_variants
    kind = spec.kind
    if kind in ("pretrain-mlm", "pair-classify"):
        same = rng.random() < 0.5
        va = int(rng.integers(G))
        vb = va if same else int((va + rng.integers(1, G)) % G)
        a, _ = fam.sample(rng, va, length())
        b, _ = fam.sample(rng, vb, length())
        toks, segs = _pair(a, b)
        if kind == "pretrain-mlm":
            return _mask_tokens(rng, toks, segs)
        return Example(toks, segs, int(same))
    if kind == "single-classify":
        v = int(rng.integers(G))
        a, _ = fam.sample(rng, v, length())
        toks, segs = _single(a)
        return Example(toks, segs, v % 2)
    if kind == "pair-regress":
        v = int(rng.integers(G))
        a, _ = fam.sample(rng, v, length())
        if rng.random() < 0.2:
            b, _ = fam.sample(rng, int(rng.integers(G)), length())
        else:
            b = _mutate(rng, fam, a, float(rng.uniform(0.0, 0.8)))
        b = b[: spec.max_len + 4]
        toks, segs = _pair(a, b)
        return Example(toks, segs, round(edit_similarity(a, b), 12))
    if kind == "token-tag":
        v = int(rng.integers(G))
        a, states = fam.sample(rng, v, length())
        toks, segs = _single(a)
        return Example(toks, segs, (IGNORE, *states.tolist(), IGNORE))
    raise TaskError(f"unknown task kind {kind!r}")


_KIND_CODE = {k: i for i, k in enumerate(TASK_KINDS)}


def _generate(spec):
    spec.validate()
    fam = GrammarFamily.for_spec(spec)
    rng = np.random.default_rng([spec.seed, _KIND_CODE[spec.kind], 0x5EED])
    train = [_draw(spec, fam, rng) for _ in range(spec.size)]
    seen = {(ex.tokens, ex.segments) for ex in train}
    dev = []
    attempts = 0
    while len(dev) < spec.dev_size:
        ex = _draw(spec, fam, rng)
        attempts += 1
        if attempts > 100 * spec.dev_size:
            raise TaskError("could not draw enough dev examples disjoint from train")
        if (ex.tokens, ex.segments) in seen:
            continue
        seen.add((ex.tokens, ex.segments))
        dev.append(ex)
    kind = spec.kind
    if kind == "pretrain-mlm":
        label_kind, n_labels = "token", spec.vocab_size
    elif kind == "token-tag":
        label_kind, n_labels = "token", spec.n_states
    elif kind == "pair-regress":
        label_kind, n_labels = "float", 1
    else:
        label_kind, n_labels = "class", 2
    return Dataset(
        name=kind,
        label_kind=label_kind,
        num_labels=n_labels,
        vocab_size=spec.vocab_size,
        train=tuple(train),
        dev=tuple(dev),
        metric=spec.metric or DEFAULT_METRIC[kind],
        provenance={"generator": kind, **spec.as_dict()},
    )


def gen_pretrain(spec):
    """Masked-symbol prediction corpus: 15% of content positions become ``[MASK]``."""
    if spec.kind != "pretrain-mlm":
        raise TaskError("gen_pretrain needs kind='pretrain-mlm'")
    return _generate(spec)


def gen_downstream(spec):
    if spec.kind == "pretrain-mlm":
        raise TaskError("use gen_pretrain for the pre-training corpus")
    return _generate(spec)


def generate(spec):
    return _generate(spec)


def bayes_predict(spec, example):
    """Prediction of the Bayes-optimal rule that knows the generating grammar."""
    fam = GrammarFamily.for_spec(spec)
    toks = np.asarray(example.tokens)
    segs = np.asarray(example.segments)
    content = toks >= FIRST_SYMBOL
    if spec.kind == "single-classify":
        post = fam.variant_posterior(toks[content])
        return int(post[1::2].sum() > post[0::2].sum())
    if spec.kind == "pair-classify":
        pa = fam.variant_posterior(toks[content & (segs == 0)])
        pb = fam.variant_posterior(toks[content & (segs == 1)])
        G = fam.n_variants
        same = float(pa @ pb) / G
        diff = (float(pa.sum() * pb.sum()) - float(pa @ pb)) / (G * (G - 1))
        return int(same > diff)
    if spec.kind == "token-tag":
        post = fam.state_posterior(toks[content])
        return (IGNORE, *post.argmax(axis=1).tolist(), IGNORE)
    if spec.kind == "pair-regress":
        return edit_similarity(toks[content & (segs == 0)], toks[content & (segs == 1)])
    raise TaskError(f"no Bayes rule for {spec.kind!r}")


# ---------------------------------------------------------------- batching


class Batch(NamedTuple):
    ids: np.ndarray
    segments: np.ndarray
    mask: np.ndarray
    labels: object


def collate(examples, label_kind):
    """Right-pad to the longest sequence in the batch."""
    S = max(len(ex.tokens) for ex in examples)
    B = len(examples)
    ids = np.full((B, S), PAD, dtype=np.int64)
    segs = np.zeros((B, S), dtype=np.int64)
    mask = np.zeros((B, S))
    tok_labels = np.full((B, S), IGNORE, dtype=np.int64) if label_kind == "token" else None
    for i, ex in enumerate(examples):
        n = len(ex.tokens)
        ids[i, :n] = ex.tokens
        segs[i, :n] = ex.segments
        mask[i, :n] = 1.0
        if tok_labels is not None:
            tok_labels[i, :n] = ex.label
    if label_kind == "token":
        labels = tok_labels
    elif label_kind == "float":
        labels = np.array([ex.label for ex in examples], dtype=np.float64)
    else:
        labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return Batch(ids, segs, mask, labels)


# ---------------------------------------------------------------- TSV ingestion


def _truncate_pair(a, b, budget):
    a, b = list(a), list(b)
    while len(a) + len(b) > budget:
        if len(a) > len(b):
            a.pop()
        else:
            b.pop()
    return a, b


def _read_tsv(path, needed):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        if reader.fieldnames is None:
            raise TaskError(f"{path}: empty file")
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise TaskError(f"{path}: missing column {missing[0]!r}")
        return list(reader)


def load_tsv(path, schema, dev_path=None, label_kind="class", max_seq_len=32,
             vocab_size=128, min_freq=1, dev_fraction=0.1):
    """Whitespace-tokenised TSV (with header) into a :class:`Dataset`.

    ``schema`` maps roles ``sentence``, optional ``sentence2`` and ``label``
    to column names. The vocabulary comes from the train rows only; rows whose
    label does not parse are skipped and counted in ``provenance``.
    """
    roles = {"sentence": schema["sentence"], "label": schema["label"]}
    if schema.get("sentence2"):
        roles["sentence2"] = schema["sentence2"]
    needed = list(roles.values())
    rows = _read_tsv(path, needed)
    if not rows:
        raise TaskError(f"{path}: no data rows")
    if dev_path is not None:
        train_rows, dev_rows = rows, _read_tsv(dev_path, needed)
    else:
        cut = len(rows) - max(1, int(round(len(rows) * dev_fraction)))
        train_rows, dev_rows = rows[:cut], rows[cut:]
    if not train_rows:
        raise TaskError(f"{path}: too few rows to split off a dev set")

    counts = {}
    for r in train_rows:
        for key in ("sentence", "sentence2"):
            if key in roles:
                for tok in (r[roles[key]] or "").split():
                    counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    vocab = {t: i + len(SPECIAL_TOKENS) for i, t in enumerate(ranked[: vocab_size - len(SPECIAL_TOKENS)])}

    label_values = None
    if label_kind == "class":
        raw = sorted({(r[roles["label"]] or "").strip() for r in train_rows} - {""})
        try:
            label_values = {s: int(s) for s in raw}
        except ValueError:
            label_values = {s: i for i, s in enumerate(raw)}

    skipped = 0

    def encode(r):
        nonlocal skipped
        raw = (r[roles["label"]] or "").strip()
        try:
            if label_kind == "float":
                label = float(raw)
            else:
                label = label_values[raw]
        except (KeyError, ValueError):
            skipped += 1
            return None
        a = [vocab.get(t, UNK) for t in (r[roles["sentence"]] or "").split()]
        if "sentence2" in roles:
            b = [vocab.get(t, UNK) for t in (r[roles["sentence2"]] or "").split()]
            a, b = _truncate_pair(a, b, max_seq_len - 3)
            toks = (CLS, *a, SEP, *b, SEP)
            segs = (0,) * (len(a) + 2) + (1,) * (len(b) + 1)
        else:
            a = a[: max_seq_len - 2]
            toks = (CLS, *a, SEP)
            segs = (0,) * len(toks)
        return Example(toks, segs, label)

    train = tuple(ex for ex in map(encode, train_rows) if ex is not None)
    dev = tuple(ex for ex in map(encode, dev_rows) if ex is not None)
    if skipped:
        log.warning("%s: skipped %d rows with unparseable labels", path, skipped)
    if label_kind == "float":
        n_labels = 1
    else:
        n_labels = max(2, max(label_values.values()) + 1 if label_values else 2)
    with open(path, "rb") as fh:
        file_hash = hashlib.sha256(fh.read()).hexdigest()
    return Dataset(
        name=str(path),
        label_kind=label_kind,
        num_labels=n_labels,
        vocab_size=vocab_size,
        train=train,
        dev=dev,
        metric="pearson" if label_kind == "float" else "accuracy",
        provenance={"path": str(path), "sha256": file_hash, "skipped_rows": skipped,
                    "vocab": len(vocab) + len(SPECIAL_TOKENS)},
    )
