"""Dual-copy quantized training.

Each trainable tensor keeps a full-precision master. Before every minibatch
the quantized view is recomputed from the master, forward and backward run
on the view, and the gradient (straight-through: the rounding is treated as
the identity) updates the master with Adam.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import CharCorpus, FeatureDataset
from .metrics import EpochRecord, RunLog, accuracy, bpc
from .models import gru_loss_and_grads, vanilla_loss_and_grads
from .quantize import QuantMethod, quantize_tensor
from .tensor import ParameterError, RandomSource

log = logging.getLogger(__name__)

NO_QUANT = QuantMethod("none")


class TrainingError(RuntimeError):
    """Training diverged or cannot start."""


class ConfigError(ValueError):
    pass


@dataclass
class ShadowParam:
    name: str
    master: np.ndarray
    quantized: np.ndarray
    method: QuantMethod = NO_QUANT

    @classmethod
    def create(cls, name: str, value: np.ndarray, method: QuantMethod = NO_QUANT) -> "ShadowParam":
        value = np.asarray(value, dtype=np.float64)
        return cls(name, value.copy(), value.copy(), method)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class TrainConfig:
    max_epochs: int = 400
    patience: int = 100
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float | None = None
    method: QuantMethod = NO_QUANT
    quantized: tuple[str, ...] | None = None  # None: every parameter
    clip_master: bool = False
    monitor: str = "full"
    record_time: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError(f"need 1 <= patience <= max_epochs, got patience={self.patience}, max_epochs={self.max_epochs}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive or None")
        if self.monitor not in ("full", "quant"):
            raise ConfigError("monitor must be 'full' or 'quant'")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


# ----------------------------------------------------------------- tasks


class LanguageModelTask:
    """Next-character prediction; validation metric is BPC (lower is better)."""

    higher_is_better = False

    def __init__(self, corpus: CharCorpus):
        self.corpus = corpus
        self.chunks = corpus.train_chunks()
        self.valid = corpus.eval_chunks("valid")
        if len(self.chunks) == 0 or not self.valid:
            raise ConfigError("language-model training needs non-empty train and validation splits")

    @property
    def n_train(self) -> int:
        return len(self.chunks)

    def loss_and_grads(self, weights, index: np.ndarray):
        return vanilla_loss_and_grads(weights, self.chunks[index])

    def evaluate(self, weights) -> float:
        return bpc(weights, self.valid)


class ClassificationTask:
    """Sequence classification; validation metric is accuracy (higher is better)."""

    higher_is_better = True

    def __init__(self, train: FeatureDataset, valid: FeatureDataset):
        if len(train) == 0 or len(valid) == 0:
            raise ConfigError("classification training needs non-empty train and validation splits")
        self.x = train.sequences()
        self.y = train.labels
        self.valid_x = valid.sequences()
        self.valid_y = valid.labels

    @property
    def n_train(self) -> int:
        return len(self.y)

    def loss_and_grads(self, weights, index: np.ndarray):
        return gru_loss_and_grads(weights, self.x[index], self.y[index])

    def evaluate(self, weights) -> float:
        return accuracy(weights, self.valid_x, self.valid_y)


# ------------------------------------------------------------ primitives


def refresh_quantized(params: Sequence[ShadowParam], rng: RandomSource) -> None:
    for p in params:
        p.quantized = quantize_tensor(p.master, p.method, rng)


def bptt_step(task, weights: Mapping[str, np.ndarray], index: np.ndarray):
    """Loss and gradients of a minibatch w.r.t. the weights it was run on."""
    loss, grads = task.loss_and_grads(weights, index)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite training loss {loss!r} on a batch of {len(index)} samples")
    return loss, grads


def clip_gradients(grads: dict, max_norm: float) -> dict:
    """Scale all gradients together so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ParameterError("max_norm must be positive")
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


def adam_update(params: Sequence[ShadowParam], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One Adam step on the masters; quantized views are left as they are."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p in params:
        g = grads[p.name]
        if g.shape != p.master.shape:
            raise ParameterError(f"gradient for {p.name} has shape {g.shape}, master {p.master.shape}")
        m = b1 * state.m.get(p.name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(p.name, 0.0) + (1.0 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        p.master = p.master - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class EarlyStopping:
    """Track the best epoch; stop once it is ``patience`` epochs old.

    No stop is allowed before epoch ``patience``. Only strict improvements
    move the best epoch, so ties keep the earliest one.
    """

    def __init__(self, patience: int, higher_is_better: bool):
        self.patience = patience
        self.higher = higher_is_better
        self.best_epoch = 0
        self.best_value = None

    def update(self, epoch: int, value: float) -> bool:
        if self.best_value is None or (value > self.best_value if self.higher else value < self.best_value):
            self.best_epoch, self.best_value = epoch, value
        return epoch >= self.patience and epoch - self.best_epoch >= self.patience


# ------------------------------------------------------------------ loop


def make_shadow_params(model, config: TrainConfig) -> list[ShadowParam]:
    names = model.param_names()
    chosen = names if config.quantized is None else config.quantized
    unknown = set(chosen) - set(names)
    if unknown:
        raise ConfigError(f"cannot quantize unknown parameters {sorted(unknown)}")
    params = model.params()
    return [ShadowParam.create(n, params[n], config.method if n in chosen else NO_QUANT) for n in names]


def _deterministic_view(params: Sequence[ShadowParam]) -> dict:
    return {p.name: quantize_tensor(p.master, p.method.deterministic()) for p in params}


def train_loop(model, task, config: TrainConfig) -> RunLog:
    """Minibatch training with per-epoch validation and early stopping.

    Returns a RunLog whose ``best_params`` / ``final_params`` hold master
    weights. ``val_full`` evaluates the masters, ``val_quant`` their
    deterministic quantization.
    """
    if task.n_train == 0:
        raise ConfigError("empty training split")
    root = RandomSource(config.seed)
    quant_rng = root.spawn(1)
    order_rng = root.spawn(2)
    params = make_shadow_params(model, config)
    state = AdamState(config.lr, config.beta1, config.beta2, config.eps)
    stopper = EarlyStopping(config.patience, task.higher_is_better)
    run = RunLog(metadata={"seed": config.seed, "method": str(config.method)})

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        order = order_rng.permutation(task.n_train)
        loss_sum = 0.0
        for start in range(0, task.n_train, config.batch_size):
            index = order[start : start + config.batch_size]
            refresh_quantized(params, quant_rng)
            loss, grads = bptt_step(task, {p.name: p.quantized for p in params}, index)
            loss_sum += loss * len(index)
            if config.grad_clip_norm is not None:
                grads = clip_gradients(grads, config.grad_clip_norm)
            adam_update(params, grads, state)
            if config.clip_master:
                for p in params:
                    if p.method.kind != "none":
                        p.master = np.clip(p.master, -1.0, 1.0)

        masters = {p.name: p.master for p in params}
        val_full = task.evaluate(masters)
        val_quant = task.evaluate(_deterministic_view(params))
        seconds = time.perf_counter() - started if config.record_time else 0.0
        run.append(EpochRecord(epoch, loss_sum / task.n_train, val_full, val_quant, seconds))
        log.info("epoch %d loss %.4f val_full %.4f val_quant %.4f", epoch, loss_sum / task.n_train, val_full, val_quant)

        stop = stopper.update(epoch, val_full if config.monitor == "full" else val_quant)
        if stopper.best_epoch == epoch:
            run.best_params = {k: v.copy() for k, v in masters.items()}
        if stop:
            break

    run.best_epoch = stopper.best_epoch
    run.final_params = {p.name: p.master.copy() for p in params}
    return run
