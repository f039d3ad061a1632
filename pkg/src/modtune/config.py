"""Flat ``key = value`` run configuration files."""

from __future__ import annotations

import hashlib

from .model import preset
from .selection import SelectionSpec
from .tasks import TASK_KINDS, TaskSpec
from .trainer import PAPER_LR_SWEEP, TrainConfig


class ConfigFileError(ValueError):
    pass


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _floats(s):
    return tuple(float(x) for x in s.replace(",", " ").split())


def _ints(s):
    return tuple(int(x) for x in s.replace(",", " ").split())


def _kinds(s):
    kinds = tuple(x for x in s.replace(",", " ").split())
    bad = [k for k in kinds if k not in TASK_KINDS]
    if bad or not kinds:
        raise ValueError(f"unknown task kind {bad[0] if bad else s!r}")
    return kinds


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _str(s):
    if not s:
        raise ValueError("empty value")
    return s


KEYS = {
    "model.preset": _str,
    "model.L": _int,
    "model.H": _int,
    "model.F": _int,
    "model.A": _int,
    "model.V": _int,
    "model.P": _int,
    "model.dropout": _float,
    "task.kind": _kinds,
    "task.size": _int,
    "task.dev_size": _int,
    "task.seed": _int,
    "task.noise": _float,
    "task.grammar_seed": _int,
    "regime": _str,
    "layers": _ints,
    "n_outliers": _int,
    "rand_budget": _int,
    "rand_seed": _int,
    "include_classifier": _bool,
    "train.lr": _float,
    "train.lr_sweep": _floats,
    "train.epochs": _int,
    "train.batch": _int,
    "train.warmup": _float,
    "train.eps": _float,
    "train.seeds": _ints,
    "train.max_seq_len": _int,
    "analyze.n_outliers": _int,
    "analyze.sample_size": _int,
    "analyze.seed": _int,
    "io.checkpoint": _str,
    "io.out_dir": _str,
}

_MODEL_FIELDS = {"L": "num_layers", "H": "hidden", "F": "ffn_dim", "A": "num_heads",
                 "V": "vocab_size", "P": "max_positions", "dropout": "dropout"}


class RunConfig:
    """Parsed config plus the exact bytes it came from."""

    def __init__(self, values, raw=b"", lines=None, path=None):
        self.values = dict(values)
        self.raw = raw
        self.lines = dict(lines or {})
        self.path = path

    def __contains__(self, key):
        return key in self.values

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def hash(self):
        return hashlib.sha256(self.raw).hexdigest()

    def require(self, *keys):
        missing = [k for k in keys if k not in self.values]
        if missing:
            raise ConfigFileError(f"{self.path or 'config'}: missing required key {missing[0]!r}")

    def _fail(self, key, msg):
        where = f"line {self.lines[key]}: " if key in self.lines else ""
        raise ConfigFileError(f"{self.path or 'config'}: {where}{msg}")

    def model_config(self, num_classes=2):
        overrides = {field: self.values[f"model.{k}"] for k, field in _MODEL_FIELDS.items()
                     if f"model.{k}" in self.values}
        try:
            return preset(self.get("model.preset", "toy"), num_classes=num_classes, **overrides)
        except ValueError as exc:
            self._fail("model.preset", str(exc))

    def task_kinds(self):
        return self.get("task.kind", ("pair-classify",))

    def task_spec(self, kind=None, vocab_size=None):
        kind = kind or self.task_kinds()[0]
        kw = {"kind": kind}
        for key, field in (("task.size", "size"), ("task.dev_size", "dev_size"), ("task.seed", "seed"),
                           ("task.noise", "noise"), ("task.grammar_seed", "grammar_seed")):
            if key in self.values:
                kw[field] = self.values[key]
        if vocab_size is not None:
            kw["vocab_size"] = vocab_size
        spec = TaskSpec(**kw)
        try:
            return spec.validate()
        except ValueError as exc:
            self._fail("task.kind", str(exc))

    def selection_spec(self):
        if "regime" not in self.values:
            return SelectionSpec("FullFT")
        try:
            return SelectionSpec(
                regime=self.values["regime"],
                layers=self.get("layers"),
                n_outliers=self.get("n_outliers"),
                rand_budget=self.get("rand_budget"),
                rand_seed=self.get("rand_seed", 0),
                include_classifier=self.get("include_classifier", True),
            )
        except ValueError as exc:
            self._fail("regime", str(exc))

    def train_config(self, seed_override=None):
        kw = {}
        for key, field in (("train.lr", "peak_lr"), ("train.lr_sweep", "lr_sweep"),
                           ("train.epochs", "epochs"), ("train.batch", "batch_size"),
                           ("train.warmup", "warmup_ratio"), ("train.eps", "adam_eps"),
                           ("train.seeds", "seeds"), ("train.max_seq_len", "max_seq_len")):
            if key in self.values:
                kw[field] = self.values[key]
        if seed_override is not None:
            kw["seeds"] = (seed_override,)
        kw.setdefault("lr_sweep", PAPER_LR_SWEEP)
        tc = TrainConfig(**kw)
        try:
            return tc.validate()
        except ValueError as exc:
            self._fail("train.lr", str(exc))


def parse_config(text, path=None):
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown or repeated keys are errors."""
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    where = path or "config"
    try:
        body = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigFileError(f"{where}: not valid UTF-8 ({exc})") from None
    values, lines = {}, {}
    for lineno, line in enumerate(body.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{where}: line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigFileError(f"{where}: line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigFileError(f"{where}: line {lineno}: duplicate key {key!r} "
                                  f"(first set on line {lines[key]})")
        try:
            values[key] = KEYS[key](value)
        except ValueError as exc:
            raise ConfigFileError(f"{where}: line {lineno}: bad value for {key!r}: {exc}") from None
        lines[key] = lineno
    return RunConfig(values, raw, lines, path)


def load_config(path):
    with open(path, "rb") as fh:
        return parse_config(fh.read(), str(path))
