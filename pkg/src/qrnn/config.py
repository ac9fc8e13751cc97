"""Experiment configuration files.

INI syntax with one section per concern::

    [experiment]   name, task (charlm | seqclass), output_dir, seeds, methods
    [data]         corpus, split, seq_len, max_chars          (charlm)
                   synthetic, synth_seed, train_per_class,
                   valid_per_class, train_path, valid_path,
                   rows, cols                                  (seqclass)
    [model]        hidden_size, init_scale (charlm), dense_size (seqclass)
    [train]        max_epochs, patience, batch_size, lr, beta1, beta2, eps,
                   grad_clip_norm (number or off), clip_master, monitor,
                   record_time
    [quant]        groups (parameter groups to quantize, or "all")

Lists are comma separated. Unknown sections or keys, and keys that do not
apply to the chosen task, are errors reported with their line number.
Relative paths are taken relative to the working directory.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path

from .models import GRU_GROUPS, VANILLA_GROUPS
from .quantize import QuantMethod
from .tensor import ParameterError
from .train import ConfigError, TrainConfig

_COMMON = {
    "experiment": {"name", "task", "output_dir", "seeds", "methods"},
    "model": {"hidden_size"},
    "train": {
        "max_epochs", "patience", "batch_size", "lr", "beta1", "beta2", "eps",
        "grad_clip_norm", "clip_master", "monitor", "record_time",
    },
    "quant": {"groups"},
    "data": set(),
}
_TASK_KEYS = {
    "charlm": {"data": {"corpus", "split", "seq_len", "max_chars"}, "model": {"init_scale"}},
    "seqclass": {
        "data": {"synthetic", "synth_seed", "train_per_class", "valid_per_class", "train_path", "valid_path", "rows", "cols"},
        "model": {"dense_size"},
    },
}


@dataclass
class ExperimentConfig:
    name: str
    task: str
    output_dir: Path
    seeds: list[int]
    methods: list[QuantMethod]
    hidden_size: int
    train: TrainConfig
    groups: list[str]
    # charlm
    corpus: Path | None = None
    split: tuple[float, float, float] = (0.9, 0.05, 0.05)
    seq_len: int = 50
    max_chars: int | None = 1_000_000
    init_scale: float = 0.01
    # seqclass
    dense_size: int = 64
    synthetic: bool = True
    synth_seed: int = 7
    train_per_class: int = 100
    valid_per_class: int = 50
    train_path: Path | None = None
    valid_path: Path | None = None
    rows: int = 39
    cols: int = 200
    source: dict = field(default_factory=dict)

    def quantized_names(self) -> tuple[str, ...]:
        table = VANILLA_GROUPS if self.task == "charlm" else GRU_GROUPS
        names: list[str] = []
        for group in self.groups:
            names.extend(table[group])
        return tuple(names)

    def train_config(self, method: QuantMethod, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(
            max_epochs=t.max_epochs, patience=t.patience, batch_size=t.batch_size, seed=seed,
            lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps, grad_clip_norm=t.grad_clip_norm,
            method=method, quantized=self.quantized_names(), clip_master=t.clip_master,
            monitor=t.monitor, record_time=t.record_time,
        )


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines: dict[tuple[str, str], int] = {}
    section = ""
    for number, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        head = re.match(r"^\[([^\]]+)\]", stripped)
        if head:
            section = head.group(1).strip()
            lines.setdefault((section, ""), number)
        elif stripped and stripped[0] not in "#;":
            key = re.split(r"[=:]", stripped, maxsplit=1)[0].strip().lower()
            lines.setdefault((section, key), number)
    return lines


def _list(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    return parse_config(text, str(path))


def parse_config(text: str, origin: str = "<config>") -> ExperimentConfig:
    lines = _key_lines(text)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from exc

    def where(section: str, key: str = "") -> str:
        return f"{origin}:{lines.get((section, key), '?')}"

    for section in parser.sections():
        if section not in _COMMON:
            raise ConfigError(f"{where(section)}: unknown section [{section}]")
    if not parser.has_option("experiment", "task"):
        raise ConfigError(f"{origin}: [experiment] task is required (charlm or seqclass)")
    task = parser.get("experiment", "task").strip()
    if task not in _TASK_KEYS:
        raise ConfigError(f"{where('experiment', 'task')}: task must be charlm or seqclass, got {task!r}")
    for section in parser.sections():
        allowed = _COMMON[section] | _TASK_KEYS[task].get(section, set())
        for key in parser.options(section):
            if key not in allowed:
                raise ConfigError(f"{where(section, key)}: unknown key {key!r} in [{section}] for task {task}")

    def get(section: str, key: str, convert, default):
        if not parser.has_option(section, key):
            return default
        raw = parser.get(section, key)
        try:
            return convert(raw)
        except (ValueError, ParameterError) as exc:
            raise ConfigError(f"{where(section, key)}: bad value for {key}: {exc}") from exc

    def clip_norm(raw: str):
        return None if raw.strip().lower() in ("off", "none") else float(raw)

    default_clip = 1.0 if task == "charlm" else None
    try:
        train = TrainConfig(
            max_epochs=get("train", "max_epochs", int, 400),
            patience=get("train", "patience", int, 100),
            batch_size=get("train", "batch_size", int, 32),
            lr=get("train", "lr", float, 1e-3),
            beta1=get("train", "beta1", float, 0.9),
            beta2=get("train", "beta2", float, 0.999),
            eps=get("train", "eps", float, 1e-8),
            grad_clip_norm=get("train", "grad_clip_norm", clip_norm, default_clip),
            clip_master=get("train", "clip_master", _bool, False),
            monitor=get("train", "monitor", str.strip, "full"),
            record_time=get("train", "record_time", _bool, False),
        )
    except ConfigError as exc:
        raise ConfigError(f"{where('train')}: {exc}") from exc

    groups_table = VANILLA_GROUPS if task == "charlm" else GRU_GROUPS
    default_groups = "all" if task == "charlm" else "gru"
    groups = get("quant", "groups", _list, _list(default_groups))
    if groups == ["all"]:
        groups = list(groups_table)
    for g in groups:
        if g not in groups_table:
            raise ConfigError(f"{where('quant', 'groups')}: unknown group {g!r}; choose from {sorted(groups_table)} or all")

    seeds = get("experiment", "seeds", lambda s: [int(x) for x in _list(s)], [0])
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError(f"{where('experiment', 'seeds')}: seeds must be non-negative integers")
    methods = get("experiment", "methods", lambda s: [QuantMethod.parse(x) for x in _list(s)], [QuantMethod("none")])
    if not methods:
        raise ConfigError(f"{where('experiment', 'methods')}: at least one method required")

    cfg = ExperimentConfig(
        name=get("experiment", "name", str.strip, task),
        task=task,
        output_dir=Path(get("experiment", "output_dir", str.strip, "runs")),
        seeds=seeds,
        methods=methods,
        hidden_size=get("model", "hidden_size", int, 64),
        train=train,
        groups=groups,
        source={s: dict(parser.items(s)) for s in parser.sections()},
    )
    if cfg.hidden_size < 1:
        raise ConfigError(f"{where('model', 'hidden_size')}: hidden_size must be >= 1")

    if task == "charlm":
        corpus = get("data", "corpus", str.strip, None)
        if corpus is None:
            raise ConfigError(f"{where('data')}: charlm needs [data] corpus")
        cfg.corpus = Path(corpus)
        split = get("data", "split", lambda s: tuple(float(x) for x in _list(s)), cfg.split)
        if len(split) != 3 or min(split) <= 0 or abs(sum(split) - 1.0) > 1e-9:
            raise ConfigError(f"{where('data', 'split')}: split needs three positive fractions summing to 1")
        cfg.split = split
        cfg.seq_len = get("data", "seq_len", int, 50)
        max_chars = get("data", "max_chars", lambda s: None if s.strip().lower() == "none" else int(s), cfg.max_chars)
        cfg.max_chars = max_chars
        cfg.init_scale = get("model", "init_scale", float, 0.01)
        if cfg.seq_len < 2:
            raise ConfigError(f"{where('data', 'seq_len')}: seq_len must be >= 2")
        if cfg.init_scale <= 0:
            raise ConfigError(f"{where('model', 'init_scale')}: init_scale must be positive")
    else:
        cfg.dense_size = get("model", "dense_size", int, 64)
        cfg.synthetic = get("data", "synthetic", _bool, True)
        cfg.synth_seed = get("data", "synth_seed", int, 7)
        cfg.train_per_class = get("data", "train_per_class", int, 100)
        cfg.valid_per_class = get("data", "valid_per_class", int, 50)
        cfg.rows = get("data", "rows", int, 39)
        cfg.cols = get("data", "cols", int, 200)
        train_path = get("data", "train_path", str.strip, None)
        valid_path = get("data", "valid_path", str.strip, None)
        if cfg.synthetic and (train_path or valid_path):
            raise ConfigError(f"{where('data')}: use either synthetic = true or train_path/valid_path, not both")
        if not cfg.synthetic and not (train_path and valid_path):
            raise ConfigError(f"{where('data')}: synthetic = false needs train_path and valid_path")
        cfg.train_path = Path(train_path) if train_path else None
        cfg.valid_path = Path(valid_path) if valid_path else None
        for key in ("dense_size", "train_per_class", "valid_per_class", "rows", "cols"):
            if getattr(cfg, key) < 1:
                raise ConfigError(f"{where('data' if key != 'dense_size' else 'model', key)}: {key} must be >= 1")
    return cfg
