"""BERT-style post-norm encoder with a tagged parameter registry.

Every parameter lives in exactly one :class:`ParamGroup`, tagged with the
module it belongs to and its block index. Selection regimes and parameter
accounting work off those tags, so they also run on a shape-only registry
(see :func:`describe_registry`) without materialising a 110M-parameter model.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T

MULTI_HEAD = "MultiHead"
FEED_FORWARD = "FeedForward"
LN_ATT = "LN_Att"
LN_FFN = "LN_FFN"
BIAS = "Bias"
EMBEDDING = "Embedding"
EMBEDDING_LN = "EmbeddingLN"
CLASSIFIER = "Classifier"
TAGS = (MULTI_HEAD, FEED_FORWARD, LN_ATT, LN_FFN, BIAS, EMBEDDING, EMBEDDING_LN, CLASSIFIER)

HEAD_KINDS = ("classify", "regress", "tag")
INIT_STD = 0.02
MASK_BIAS = -1e9
MAGIC = b"MWT1"


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


class CheckpointMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden: int = 64
    ffn_dim: int = 256
    num_heads: int = 4
    vocab_size: int = 128
    max_positions: int = 32
    type_vocab: int = 2
    num_classes: int = 2
    dropout: float = 0.1
    layer_norm_eps: float = 1e-12

    def validate(self):
        dims = (self.num_layers, self.hidden, self.ffn_dim, self.num_heads,
                self.vocab_size, self.max_positions, self.type_vocab)
        if any(int(d) != d or d < 1 for d in dims):
            raise ConfigError(f"all dimensions must be positive integers: {self}")
        if self.hidden % self.num_heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by num_heads={self.num_heads}")
        if self.num_classes < 0:
            raise ConfigError("num_classes must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def head_dim(self):
        return self.hidden // self.num_heads


PRESETS = {
    "base": ModelConfig(num_layers=12, hidden=768, ffn_dim=3072, num_heads=12,
                        vocab_size=30522, max_positions=512, type_vocab=2),
    "toy": ModelConfig(num_layers=4, hidden=64, ffn_dim=256, num_heads=4,
                       vocab_size=128, max_positions=32, type_vocab=2),
}


def preset(name, **overrides):
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides).validate()


@dataclass
class ParamGroup:
    name: str
    shape: tuple
    tag: str
    layer: int | None = None
    is_bias: bool = False
    tensor: T.Tensor | None = field(default=None, repr=False)

    @property
    def size(self):
        return math.prod(self.shape)

    @property
    def values(self):
        if self.tensor is None:
            raise ValueError(f"{self.name} is shape-only; no values")
        return self.tensor.values


def head_outputs(config, head):
    if head not in HEAD_KINDS:
        raise ConfigError(f"unknown head kind {head!r}")
    if head == "regress" or config.num_classes == 0:
        return 1
    return config.num_classes


def _layout(config, head):
    """(name, shape, tag, layer, is_bias) for every parameter, in registry order."""
    H, F, c = config.hidden, config.ffn_dim, config
    rows = [
        ("embeddings.word", (c.vocab_size, H), EMBEDDING, None, False),
        ("embeddings.position", (c.max_positions, H), EMBEDDING, None, False),
        ("embeddings.type", (c.type_vocab, H), EMBEDDING, None, False),
        ("embeddings.ln.gamma", (H,), EMBEDDING_LN, None, False),
        ("embeddings.ln.beta", (H,), EMBEDDING_LN, None, False),
    ]
    for i in range(config.num_layers):
        p = f"layer.{i}."
        for proj in ("q", "k", "v", "o"):
            rows.append((p + f"attn.{proj}.weight", (H, H), MULTI_HEAD, i, False))
            rows.append((p + f"attn.{proj}.bias", (H,), MULTI_HEAD, i, True))
        rows.append((p + "ln_att.gamma", (H,), LN_ATT, i, False))
        rows.append((p + "ln_att.beta", (H,), LN_ATT, i, False))
        rows.append((p + "ffn.in.weight", (H, F), FEED_FORWARD, i, False))
        rows.append((p + "ffn.in.bias", (F,), FEED_FORWARD, i, True))
        rows.append((p + "ffn.out.weight", (F, H), FEED_FORWARD, i, False))
        rows.append((p + "ffn.out.bias", (H,), FEED_FORWARD, i, True))
        rows.append((p + "ln_ffn.gamma", (H,), LN_FFN, i, False))
        rows.append((p + "ln_ffn.beta", (H,), LN_FFN, i, False))
    C = head_outputs(config, head)
    rows.append(("head.weight", (H, C), CLASSIFIER, None, False))
    rows.append(("head.bias", (C,), CLASSIFIER, None, True))
    return rows


def is_layer_norm(group):
    return group.tag in (LN_ATT, LN_FFN, EMBEDDING_LN)


def _ln_init(name, shape):
    return np.ones(shape) if name.endswith(".gamma") else np.zeros(shape)


def describe_registry(config, head="classify"):
    """Shape-only registry; LayerNorm groups carry their initial values."""
    config.validate()
    groups = []
    for name, shape, tag, layer, is_bias in _layout(config, head):
        g = ParamGroup(name, shape, tag, layer, is_bias)
        if tag in (LN_ATT, LN_FFN, EMBEDDING_LN):
            g.tensor = T.parameter(_ln_init(name, shape), name=name)
        groups.append(g)
    return groups


def _truncated_normal(rng, shape, std):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _f32(arr):
    # keep initial values float32-representable so checkpoints round-trip exactly
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def _init_values(rng, name, shape, tag, is_bias):
    if tag in (LN_ATT, LN_FFN, EMBEDDING_LN):
        return _ln_init(name, shape)
    if is_bias:
        return np.zeros(shape)
    if tag == EMBEDDING:
        return _f32(rng.standard_normal(shape) * INIT_STD)
    return _f32(_truncated_normal(rng, shape, INIT_STD))


class ParamCount(NamedTuple):
    selected: int
    total: int
    ratio: float

    @property
    def percent(self):
        return 100.0 * self.ratio

    def __str__(self):
        return f"{self.selected:,}/{self.total:,} ({self.percent:.4g}%)"


def count_params(registry, predicate: Callable[[ParamGroup], bool] | None = None):
    """Exact (selected, total, ratio) over a registry, head included in total."""
    total = sum(g.size for g in registry)
    selected = sum(g.size for g in registry if predicate is None or predicate(g))
    return ParamCount(selected, total, selected / total if total else 0.0)


def tag_filter(*tags, layers=None, bias=None):
    """Predicate over groups by tag (``Bias`` matches bias-flagged groups), layer and bias flag."""
    tags = set(tags)

    def pred(g):
        if tags and not (g.tag in tags or (BIAS in tags and g.is_bias)):
            return False
        if layers is not None and g.layer not in layers:
            return False
        if bias is not None and g.is_bias != bias:
            return False
        return True

    return pred


class Model:
    def __init__(self, config, head, groups):
        if head not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {head!r}")
        self.config = config
        self.head = head
        self.registry = groups
        self._by_name = {g.name: g for g in groups}

    def __getitem__(self, name):
        return self._by_name[name].tensor

    def group(self, name):
        return self._by_name[name]

    @property
    def parameters(self):
        return [g.tensor for g in self.registry]

    def num_params(self):
        return count_params(self.registry).total

    def zero_grad(self):
        for g in self.registry:
            g.tensor.zero_grad()

    def state(self):
        return {g.name: g.tensor.data.copy() for g in self.registry}

    def load_state(self, state, strict=True):
        for g in self.registry:
            if g.name not in state:
                if strict:
                    raise CheckpointMismatchError(f"missing tensor {g.name!r}")
                continue
            arr = np.asarray(state[g.name], dtype=np.float64)
            if arr.shape != g.shape:
                raise CheckpointMismatchError(
                    f"tensor {g.name!r} has shape {arr.shape}, expected {g.shape}")
            g.tensor.data[...] = arr
        if strict:
            extra = set(state) - set(self._by_name)
            if extra:
                raise CheckpointMismatchError(f"unexpected tensor {sorted(extra)[0]!r}")

    def copy(self):
        groups = [dataclasses.replace(g, tensor=T.parameter(g.tensor.data.copy(), name=g.name))
                  for g in self.registry]
        return Model(self.config, self.head, groups)

    def with_head(self, head, num_classes=None, seed=0):
        """New model sharing copies of the encoder weights and a fresh head."""
        cfg = self.config if num_classes is None else self.config.replace(num_classes=num_classes)
        fresh = build_model(cfg, head, seed)
        for g in self.registry:
            if g.tag != CLASSIFIER:
                fresh.group(g.name).tensor.data[...] = g.tensor.data
        return fresh

    def forward(self, ids, segments=None, attention_mask=None, mode="eval", rng=None, rows=None):
        return forward(self, ids, segments, attention_mask, mode, rng, rows)


def build_model(config, head="classify", seed=0):
    """Fresh model: truncated-normal linears, zero biases, LN gamma=1 / beta=0."""
    config.validate()
    rng = np.random.default_rng(seed)
    groups = []
    for name, shape, tag, layer, is_bias in _layout(config, head):
        data = _init_values(rng, name, shape, tag, is_bias)
        groups.append(ParamGroup(name, shape, tag, layer, is_bias,
                                 T.parameter(data, name=name)))
    return Model(config, head, groups)


def _linear(model, x, prefix):
    return T.linear(x, model[prefix + ".weight"], model[prefix + ".bias"])


def forward(model, ids, segments=None, attention_mask=None, mode="eval", rng=None, rows=None):
    """Logits ``[B, C]`` (classify/regress) or ``[B, S, C]`` (tag).

    ``rows``, tag head only: flat ``b * S + s`` positions to score; the
    result is then ``[len(rows), C]``.
    """
    cfg = model.config
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 2:
        raise T.DimensionError("ids must be [B, S]")
    B, S = ids.shape
    if S > cfg.max_positions:
        raise ValueError(f"sequence length {S} exceeds max_positions={cfg.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    segments = np.zeros_like(ids) if segments is None else np.asarray(segments, dtype=np.intp)
    if segments.shape != ids.shape:
        raise T.DimensionError("segments must match ids")
    if segments.size and (segments.min() < 0 or segments.max() >= cfg.type_vocab):
        raise ValueError(f"segment id out of range [0, {cfg.type_vocab})")
    if attention_mask is None:
        attention_mask = np.ones((B, S))
    attention_mask = np.asarray(attention_mask, dtype=np.float64)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train" and cfg.dropout > 0
    p = cfg.dropout
    H, A, D = cfg.hidden, cfg.num_heads, cfg.head_dim
    eps = cfg.layer_norm_eps

    positions = np.broadcast_to(np.arange(S), (B, S))
    x = T.add(T.embed(model["embeddings.word"], ids), T.embed(model["embeddings.position"], positions))
    x = T.add(x, T.embed(model["embeddings.type"], segments))
    x = T.layer_norm(x, model["embeddings.ln.gamma"], model["embeddings.ln.beta"], eps)
    x = T.dropout(x, p, rng, train)

    key_bias = (1.0 - attention_mask) * MASK_BIAS
    mask = T.constant(np.ascontiguousarray(
        np.broadcast_to(key_bias[:, None, None, :], (B, A, S, S))))
    inv_sqrt = 1.0 / math.sqrt(D)

    for i in range(cfg.num_layers):
        pre = f"layer.{i}."

        def heads(t):
            return T.transpose(T.reshape(t, (B, S, A, D)), (0, 2, 1, 3))

        q = heads(_linear(model, x, pre + "attn.q"))
        k = heads(_linear(model, x, pre + "attn.k"))
        v = heads(_linear(model, x, pre + "attn.v"))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        probs = T.softmax(T.add(scores, mask), axis=-1)
        probs = T.dropout(probs, p, rng, train)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (B, S, H))
        att = T.dropout(_linear(model, ctx, pre + "attn.o"), p, rng, train)
        x = T.layer_norm(T.add(x, att), model[pre + "ln_att.gamma"], model[pre + "ln_att.beta"], eps)

        h = T.gelu(_linear(model, x, pre + "ffn.in"))
        h = T.dropout(_linear(model, h, pre + "ffn.out"), p, rng, train)
        x = T.layer_norm(T.add(x, h), model[pre + "ln_ffn.gamma"], model[pre + "ln_ffn.beta"], eps)

    if model.head == "tag":
        if rows is not None:
            x = T.gather_rows(T.reshape(x, (B * S, H)), rows)
        return _linear(model, x, "head")
    return _linear(model, T.select(x, 1, 0), "head")


def attention_probs(model, ids, segments=None, attention_mask=None, layer=0):
    """First-layer style attention distribution ``[B, A, S, S]`` for inspection (eval mode)."""
    cfg = model.config
    ids = np.asarray(ids, dtype=np.intp)
    B, S = ids.shape
    segments = np.zeros_like(ids) if segments is None else np.asarray(segments)
    attention_mask = np.ones((B, S)) if attention_mask is None else np.asarray(attention_mask, float)
    A, D = cfg.num_heads, cfg.head_dim
    eps = cfg.layer_norm_eps
    x = (model["embeddings.word"].data[ids] + model["embeddings.position"].data[np.arange(S)][None]
         + model["embeddings.type"].data[segments])
    x = T.layer_norm(T.constant(x), model["embeddings.ln.gamma"], model["embeddings.ln.beta"], eps).data
    W = {n: model[f"layer.{layer}.attn.{n}.weight"].data for n in "qk"}
    b = {n: model[f"layer.{layer}.attn.{n}.bias"].data for n in "qk"}
    q = (x @ W["q"] + b["q"]).reshape(B, S, A, D).transpose(0, 2, 1, 3)
    k = (x @ W["k"] + b["k"]).reshape(B, S, A, D).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(D)
    scores = scores + ((1.0 - attention_mask) * MASK_BIAS)[:, None, None, :]
    return T.softmax(T.constant(scores), axis=-1).data


# ---------------------------------------------------------------- checkpoints


def write_checkpoint(state, path):
    """Write ``{name: array}`` in the MWT1 layout (little-endian, float32 payload)."""
    parts = [MAGIC, struct.pack("<I", len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path):
    """Parse an MWT1 file into ``{name: float64 array}``, in file order."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{path}: bad tensor name") from exc
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = math.prod(dims)
        arr = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float64).reshape(dims)
        out[name] = arr
    if pos != len(buf):
        raise CheckpointFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def save_checkpoint(model, path):
    write_checkpoint({g.name: g.tensor.data for g in model.registry}, path)


def load_checkpoint(path, config, head="classify"):
    """Rebuild a model whose registry must match the file exactly."""
    state = read_checkpoint(path)
    model = build_model(config, head, seed=0)
    for g in model.registry:
        if g.name not in state:
            raise CheckpointMismatchError(f"{path}: missing tensor {g.name!r}")
        if state[g.name].shape != g.shape:
            raise CheckpointMismatchError(
                f"{path}: tensor {g.name!r} has shape {state[g.name].shape}, expected {g.shape}")
    model.load_state(state)
    return model


def load_encoder(path, model):
    """Copy every non-classifier tensor from a checkpoint into ``model``."""
    state = read_checkpoint(path)
    encoder = [g for g in model.registry if g.tag != CLASSIFIER]
    for g in encoder:
        if g.name not in state:
            raise CheckpointMismatchError(f"{path}: missing tensor {g.name!r}")
        if state[g.name].shape != g.shape:
            raise CheckpointMismatchError(
                f"{path}: tensor {g.name!r} has shape {state[g.name].shape}, expected {g.shape}")
    model.load_state({g.name: state[g.name] for g in encoder}, strict=False)
    return model
