"""Command-line experiment runner.

    qrnn train <config>
    qrnn quantize <in.qrnn> <method> <out.qrnn> [--groups g1,g2]
    qrnn eval <model.qrnn> <data> <charlm|seqclass> [--seq-len N]
    qrnn gen-synth <seed> <n_per_class> <out.qfd>

Every subcommand exits 0 on success and 1 with a one-line diagnostic on
stderr otherwise.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, lowbit, metrics, models
from .config import ExperimentConfig, load_config
from .quantize import QuantMethod, quantize_tensor
from .tensor import RandomSource
from .train import ClassificationTask, LanguageModelTask, train_loop

log = logging.getLogger("qrnn")

# non-parameter tensors stored alongside the weights
META_TENSORS = ("alphabet", "whiten_mean", "whiten_std", "input_shape")


class CLIError(Exception):
    pass


# ------------------------------------------------------------------ train


def _load_task(cfg: ExperimentConfig):
    if cfg.task == "charlm":
        corpus = data.load_char_corpus(cfg.corpus, cfg.split, cfg.seq_len, cfg.max_chars)
        meta = {"alphabet": np.frombuffer(corpus.alphabet, dtype=np.uint8).astype(np.float64).reshape(1, -1)}
        return LanguageModelTask(corpus), meta, corpus.vocab_size
    if cfg.synthetic:
        shape = (cfg.rows, cfg.cols)
        root = RandomSource(cfg.synth_seed)
        train = data.make_synthetic_digits(root.spawn(0), cfg.train_per_class, shape=shape)
        valid = data.make_synthetic_digits(root.spawn(1), cfg.valid_per_class, shape=shape)
    else:
        train = data.load_feature_dataset(cfg.train_path)
        valid = data.load_feature_dataset(cfg.valid_path)
    train = data.pad_and_whiten(train, cfg.rows, cfg.cols)
    valid = data.pad_and_whiten(valid, cfg.rows, cfg.cols, (train.mean, train.std))
    meta = {
        "whiten_mean": train.mean.reshape(1, -1),
        "whiten_std": train.std.reshape(1, -1),
        "input_shape": np.array([[cfg.rows, cfg.cols]], dtype=np.float64),
    }
    return ClassificationTask(train, valid), meta, max(train.n_labels, valid.n_labels)


def _init_model(cfg: ExperimentConfig, seed: int, n_out: int):
    rng = RandomSource(seed).spawn(0)
    if cfg.task == "charlm":
        return models.init_vanilla(rng, n_out, cfg.hidden_size, cfg.init_scale)
    return models.init_gru(rng, cfg.rows, cfg.hidden_size, cfg.dense_size, n_out)


def run_experiment(cfg: ExperimentConfig) -> list[dict]:
    """Train every (method, seed) pair; write run CSVs, models and a summary."""
    task, meta, n_out = _load_task(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for method in cfg.methods:
        logs = []
        for seed in cfg.seeds:
            log.info("training %s method=%s seed=%d", cfg.name, method, seed)
            model = _init_model(cfg, seed, n_out)
            run = train_loop(model, task, cfg.train_config(method, seed))
            run.metadata.update(experiment=cfg.name, task=cfg.task)
            csv_path = metrics.write_run(run, out, cfg.name, str(method), seed)
            lowbit.export_model({**run.best_params, **meta}, csv_path.with_suffix(".qrnn"))
            logs.append(run)
        summary.append({"method": str(method), **metrics.summarize(logs)})
    metrics.write_summary_csv(summary, out / f"{cfg.name}_summary.csv")
    return summary


def cmd_train(args) -> None:
    cfg = load_config(args.config)
    for row in run_experiment(cfg):
        print(f"{row['method']}: mean_final={row['mean_final']:.6g} max_final={row['max_final']:.6g} runs={row['runs']}")


# --------------------------------------------------------------- quantize


def _task_of(tensors) -> str:
    if set(models.GRUClassifier.param_names()) <= set(tensors):
        return "seqclass"
    if set(models.VanillaRNNLM.param_names()) <= set(tensors):
        return "charlm"
    raise CLIError("container holds neither a charlm nor a seqclass model")


_ENCODING_FOR = {
    "ternary-deterministic": "TERN2",
    "exp-deterministic": "EXP8",
}


def quantize_container(tensors: dict, method: QuantMethod, groups=None) -> dict:
    task = _task_of(tensors)
    table = models.VANILLA_GROUPS if task == "charlm" else models.GRU_GROUPS
    if groups is None:
        groups = list(table) if task == "charlm" else ["gru"]
    unknown = [g for g in groups if g not in table]
    if unknown:
        raise CLIError(f"unknown parameter groups {unknown} for {task}; choose from {sorted(table)}")
    chosen = {name for g in groups for name in table[g]}
    final = method.deterministic()
    encoding = _ENCODING_FOR.get(final.kind, "F64")
    out = {}
    for name, packed in tensors.items():
        if name in chosen and final.kind != "none":
            values = lowbit.unpack(packed)
            if not np.all(np.isfinite(values)):
                raise CLIError(f"tensor {name} contains non-finite values")
            out[name] = lowbit.pack(quantize_tensor(values, final), encoding)
        else:
            out[name] = packed
    return out


def cmd_quantize(args) -> None:
    tensors = lowbit.import_model(args.input)
    groups = [g.strip() for g in args.groups.split(",")] if args.groups else None
    lowbit.export_model(quantize_container(tensors, QuantMethod.parse(args.method), groups), args.output)


# ------------------------------------------------------------------- eval


def weights_view(tensors: dict) -> dict:
    """Parameters for the forward pass: F64 tensors unpacked, low-bit ones kept packed."""
    return {
        name: lowbit.unpack(p) if p.encoding == "F64" else p
        for name, p in tensors.items()
        if name not in META_TENSORS
    }


def evaluate_container(tensors: dict, data_path, task: str, seq_len: int = 50) -> float:
    found = _task_of(tensors)
    if found != task:
        raise CLIError(f"model is a {found} model, not {task}")
    view = weights_view(tensors)
    if task == "charlm":
        raw = Path(data_path).read_bytes()
        if not raw:
            raise CLIError(f"{data_path}: corpus is empty")
        if "alphabet" in tensors:
            alphabet = bytes(lowbit.unpack(tensors["alphabet"]).astype(np.uint8).ravel().tolist())
        else:
            alphabet = data.build_alphabet(raw)
        vocab = view["W_xh"].shape[1]
        if len(alphabet) != vocab:
            raise CLIError(f"corpus alphabet has {len(alphabet)} symbols, model vocabulary is {vocab}")
        idx = data.encode_text(raw, alphabet)
        return metrics.bpc(view, [idx[i : i + seq_len] for i in range(0, len(idx), seq_len)])
    ds = data.load_feature_dataset(data_path)
    if "input_shape" in tensors:
        rows, cols = (int(v) for v in lowbit.unpack(tensors["input_shape"]).ravel())
    else:
        rows, cols = ds.shape
    stats = None
    if "whiten_mean" in tensors:
        stats = (lowbit.unpack(tensors["whiten_mean"]).ravel(), lowbit.unpack(tensors["whiten_std"]).ravel())
    ds = data.pad_and_whiten(ds, rows, cols, stats)
    return metrics.accuracy(view, ds.sequences(), ds.labels)


def cmd_eval(args) -> None:
    value = evaluate_container(lowbit.import_model(args.model), args.data, args.task, args.seq_len)
    print(f"metric={value!r}")


# -------------------------------------------------------------- gen-synth


def cmd_gen_synth(args) -> None:
    if args.n_per_class < 1:
        raise CLIError("n_per_class must be >= 1")
    ds = data.make_synthetic_digits(RandomSource(args.seed), args.n_per_class)
    data.write_feature_dataset(ds, args.output)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qrnn", description="Reduced-precision RNN training experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run every method and seed of an experiment config")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="deterministically quantize a model container")
    p.add_argument("input")
    p.add_argument("method")
    p.add_argument("output")
    p.add_argument("--groups", help="comma-separated parameter groups (default: all for charlm, gru for seqclass)")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="print BPC or accuracy of a model on a dataset")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("task", choices=("charlm", "seqclass"))
    p.add_argument("--seq-len", type=int, default=50)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-synth", help="write a synthetic digits QFD file")
    p.add_argument("seed", type=int)
    p.add_argument("n_per_class", type=int)
    p.add_argument("output")
    p.set_defaults(func=cmd_gen_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (CLIError, OSError, ValueError, RuntimeError) as exc:
        print(f"qrnn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
