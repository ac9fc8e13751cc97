"""BPC and accuracy evaluation, per-epoch run logs and their CSV form."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import gru_forward, lm_logits
from .tensor import ParameterError, log_softmax_rows

CSV_COLUMNS = ("epoch", "train_loss", "val_full", "val_quant", "seconds")
SUMMARY_COLUMNS = ("method", "runs", "mean_final", "var_final", "max_final", "min_final", "mean_best_epoch")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def bpc(weights, chunks, batch_size: int = 256) -> float:
    """Mean -log2 p(next char) over every character of every chunk.

    ``chunks`` is a 2-D array or a list of 1-D index arrays of any length;
    the first character of each chunk is predicted from the zero state.
    """
    chunks = [np.asarray(c) for c in (chunks if isinstance(chunks, list) else list(np.atleast_2d(chunks)))]
    chunks = [c for c in chunks if len(c)]
    if not chunks:
        raise ParameterError("bpc needs at least one character")
    total = 0.0
    count = 0
    by_length: dict[int, list[np.ndarray]] = {}
    for c in chunks:
        by_length.setdefault(len(c), []).append(c)
    for length in sorted(by_length):
        group = np.stack(by_length[length])
        for start in range(0, len(group), batch_size):
            batch = group[start : start + batch_size]
            logp = log_softmax_rows(lm_logits(weights, batch))
            picked = np.take_along_axis(logp, batch[..., None], axis=-1)
            total += -float(np.sum(picked))
            count += batch.size
    return total / count / math.log(2.0)


def accuracy(weights, features, labels, batch_size: int = 256) -> float:
    """Fraction of samples whose most likely class (lowest index on ties) is the label."""
    labels = np.asarray(labels).reshape(-1)
    if len(labels) == 0:
        raise ParameterError("accuracy needs at least one sample")
    correct = 0
    for start in range(0, len(labels), batch_size):
        _, logp = gru_forward(weights, features[start : start + batch_size])
        correct += int(np.sum(np.argmax(logp, axis=1) == labels[start : start + batch_size]))
    return correct / len(labels)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_full: float
    val_quant: float
    seconds: float


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    best_epoch: int = 0
    best_params: dict | None = None
    final_params: dict | None = None

    def append(self, record: EpochRecord) -> None:
        last = self.records[-1].epoch if self.records else 0
        if record.epoch != last + 1:
            raise ValueError(f"epoch {record.epoch} does not follow {last}")
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def best(self) -> EpochRecord:
        return self.records[self.best_epoch - 1]


def write_csv(log: RunLog, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in log.records:
            writer.writerow([r.epoch, _fmt(r.train_loss), _fmt(r.val_full), _fmt(r.val_quant), _fmt(r.seconds)])


def read_csv(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        return [EpochRecord(int(row[0]), *map(float, row[1:])) for row in reader]


def summarize(logs: list[RunLog]) -> dict:
    """Aggregate the best-epoch validation metric across seeds."""
    finals = np.array([log.best.val_full for log in logs])
    return {
        "runs": len(logs),
        "mean_final": float(np.mean(finals)),
        "var_final": float(np.var(finals)),
        "max_final": float(np.max(finals)),
        "min_final": float(np.min(finals)),
        "mean_best_epoch": float(np.mean([log.best_epoch for log in logs])),
    }


def write_summary_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow([row["method"], row["runs"]] + [_fmt(row[c]) for c in SUMMARY_COLUMNS[2:]])


def run_csv_name(experiment: str, method: str, seed: int) -> str:
    safe = method.replace(":", "_").replace(".", "_")
    return f"{experiment}_{safe}_{seed}.csv"


def write_run(log: RunLog, directory, experiment: str, method: str, seed: int) -> Path:
    path = Path(directory) / run_csv_name(experiment, method, seed)
    write_csv(log, path)
    return path
