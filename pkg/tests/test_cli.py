import math

import numpy as np
import pytest

from qrnn import lowbit
from qrnn.cli import main
from qrnn.data import load_feature_dataset
from qrnn.metrics import read_csv
from qrnn.models import GRU_GROUPS, init_gru, init_vanilla
from qrnn.tensor import RandomSource


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def digits(tmp_path, capsys):
    path = tmp_path / "digits.qfd"
    assert run(capsys, "gen-synth", 3, 2, path)[0] == 0
    return path


@pytest.fixture
def gru_model(tmp_path):
    path = tmp_path / "gru.qrnn"
    lowbit.export_model(init_gru(RandomSource(1), 39, 4, 5, 10).params(), path)
    return path


def test_gen_synth_deterministic(tmp_path, capsys, digits):
    again = tmp_path / "again.qfd"
    assert run(capsys, "gen-synth", 3, 2, again)[0] == 0
    assert digits.read_bytes() == again.read_bytes()
    assert int.from_bytes(digits.read_bytes()[4:8], "little") == 20
    assert len(load_feature_dataset(digits)) == 20


def test_gen_synth_errors(tmp_path, capsys):
    code, _, err = run(capsys, "gen-synth", 1, 0, tmp_path / "x.qfd")
    assert code == 1 and "n_per_class" in err
    code, _, err = run(capsys, "gen-synth", 1, 1, tmp_path / "missing" / "x.qfd")
    assert code == 1 and err.startswith("qrnn gen-synth: error:")


def _gru_values(path):
    tensors = lowbit.import_model(path)
    return {n: lowbit.unpack(tensors[n]) for n in GRU_GROUPS["gru"]}, tensors


def test_quantize_ternary_value_scan(tmp_path, capsys, gru_model):
    out = tmp_path / "t.qrnn"
    assert run(capsys, "quantize", gru_model, "ternary-stochastic", out)[0] == 0
    values, tensors = _gru_values(out)
    assert set(np.unique(np.concatenate([v.ravel() for v in values.values()]))) <= {-1.0, 0.0, 1.0}
    assert tensors["W_z"].encoding == "TERN2"
    assert tensors["W_d"].encoding == "F64"  # dense layer stays full precision


def test_quantize_exp_value_scan_and_idempotence(tmp_path, capsys, gru_model):
    once, twice = tmp_path / "e1.qrnn", tmp_path / "e2.qrnn"
    assert run(capsys, "quantize", gru_model, "exp-deterministic", once)[0] == 0
    assert run(capsys, "quantize", once, "exp-deterministic", twice)[0] == 0
    assert once.read_bytes() == twice.read_bytes()
    values, _ = _gru_values(once)
    flat = np.concatenate([v.ravel() for v in values.values()])
    mant, _ = np.frexp(np.abs(flat))
    assert np.all((flat == 0) | (mant == 0.5))


def test_quantize_groups_and_errors(tmp_path, capsys, gru_model):
    out = tmp_path / "g.qrnn"
    assert run(capsys, "quantize", gru_model, "exp-deterministic", out, "--groups", "gru,dense")[0] == 0
    assert lowbit.import_model(out)["W_d"].encoding == "EXP8"
    code, _, err = run(capsys, "quantize", gru_model, "exp-deterministic", out, "--groups", "conv")
    assert code == 1 and "conv" in err
    code, _, err = run(capsys, "quantize", gru_model, "binary", out)
    assert code == 1 and "binary" in err


def test_packed_and_unpacked_eval_identical(tmp_path, capsys, gru_model, digits):
    packed = tmp_path / "p.qrnn"
    assert run(capsys, "quantize", gru_model, "exp-deterministic", packed)[0] == 0
    tensors = lowbit.import_model(packed)
    unpacked = tmp_path / "u.qrnn"
    lowbit.export_model({n: lowbit.unpack(p) for n, p in tensors.items()}, unpacked)
    assert any(p.encoding == "EXP8" for p in tensors.values())

    code_p, out_p, _ = run(capsys, "eval", packed, digits, "seqclass")
    code_u, out_u, _ = run(capsys, "eval", unpacked, digits, "seqclass")
    assert code_p == code_u == 0
    assert out_p == out_u and out_p.startswith("metric=")


def test_uniform_charlm_bpc(tmp_path, capsys):
    corpus = tmp_path / "c.txt"
    corpus.write_bytes(b"hello, quantized world\n" * 9)
    model = init_vanilla(RandomSource(0), len(set(corpus.read_bytes())), 5)
    path = tmp_path / "lm.qrnn"
    lowbit.export_model({k: np.zeros_like(v) for k, v in model.params().items()}, path)
    code, out, _ = run(capsys, "eval", path, corpus, "charlm", "--seq-len", 7)
    assert code == 0
    value = float(out.strip().split("=", 1)[1])
    assert abs(value - math.log2(len(set(corpus.read_bytes())))) < 1e-12


def test_eval_errors(tmp_path, capsys, gru_model, digits):
    code, _, err = run(capsys, "eval", gru_model, digits, "charlm")
    assert code == 1 and "seqclass" in err
    code, _, _ = run(capsys, "eval", tmp_path / "none.qrnn", digits, "seqclass")
    assert code == 1
    (tmp_path / "junk.qrnn").write_bytes(b"junk")
    code, _, err = run(capsys, "eval", tmp_path / "junk.qrnn", digits, "seqclass")
    assert code == 1 and "error" in err


def _write_charlm_config(tmp_path, extra=""):
    corpus = tmp_path / "corpus.txt"
    corpus.write_bytes(b"abcabcabdabcabcabd" * 20)
    cfg = tmp_path / "exp.ini"
    cfg.write_text(
        "[experiment]\n"
        "name = smoke\n"
        "task = charlm\n"
        f"output_dir = {tmp_path / 'out'}\n"
        "seeds = 1, 2, 3\n"
        "methods = exp-stochastic\n"
        "[data]\n"
        f"corpus = {corpus}\n"
        "seq_len = 10\n"
        "[model]\n"
        "hidden_size = 8\n"
        "[train]\n"
        "max_epochs = 2\n"
        "patience = 1\n"
        "batch_size = 8\n" + extra
    )
    return cfg


def test_train_writes_runs_and_summary(tmp_path, capsys):
    cfg = _write_charlm_config(tmp_path)
    code, out, _ = run(capsys, "train", cfg)
    assert code == 0 and out.startswith("exp-stochastic: mean_final=")
    runs = sorted((tmp_path / "out").glob("smoke_exp-stochastic_*.csv"))
    assert [p.name for p in runs] == [f"smoke_exp-stochastic_{s}.csv" for s in (1, 2, 3)]
    assert (tmp_path / "out" / "smoke_summary.csv").exists()
    assert len(list((tmp_path / "out").glob("*.qrnn"))) == 3
    first = [p.read_bytes() for p in runs]
    records = read_csv(runs[0])
    assert [r.epoch for r in records] == list(range(1, len(records) + 1))

    # rerun: byte-identical outputs
    assert run(capsys, "train", cfg)[0] == 0
    assert [p.read_bytes() for p in runs] == first

    # the saved model evaluates through eval
    model = tmp_path / "out" / "smoke_exp-stochastic_1.qrnn"
    code, out, _ = run(capsys, "eval", model, tmp_path / "corpus.txt", "charlm", "--seq-len", 10)
    assert code == 0 and out.startswith("metric=")


def test_bad_config_line_diagnostic(tmp_path, capsys):
    cfg = _write_charlm_config(tmp_path, "learning_rate = 0.1\n")
    code, _, err = run(capsys, "train", cfg)
    assert code == 1
    assert f"{cfg}:16: unknown key 'learning_rate'" in err
    assert not (tmp_path / "out").exists()
