import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrnn.lowbit import (
    EncodingError,
    FormatError,
    PackedWeights,
    export_model,
    import_model,
    matvec,
    matvec_shift,
    matvec_ternary,
    pack,
    payload_size,
    unpack,
)
from qrnn.tensor import DimensionError, matmul


def float_matvec(w, x):
    """Reference path: same ascending-column accumulation as the kernels."""
    return matmul(np.atleast_2d(x), np.ascontiguousarray(w.T))[0]


def random_ternary(g, rows, cols):
    return g.choice([-1.0, 0.0, 1.0], (rows, cols))


def random_pow2(g, rows, cols, lo=-10, hi=10):
    w = np.ldexp(1.0, g.integers(lo, hi + 1, (rows, cols))) * g.choice([-1.0, 1.0], (rows, cols))
    return np.where(g.random((rows, cols)) < 0.1, 0.0, w)


def test_tern2_bit_layout():
    p = pack(np.array([[1.0, -1.0, 0.0, 1.0]]), "TERN2")
    assert p.payload == bytes([0b01_00_11_01])


def test_exp8_bias():
    assert pack(np.array([[0.5]]), "EXP8").payload == bytes([62])
    assert pack(np.array([[-2.0, 0.0]]), "EXP8").payload == bytes([0x80 | 64, 0x7F])


def test_payload_sizes_and_reduction():
    assert payload_size("TERN2", 3, 5) == 6
    assert payload_size("EXP8", 3, 5) == 15
    w = random_ternary(np.random.default_rng(0), 64, 64)
    assert len(pack(w, "F64").payload) / len(pack(w, "TERN2").payload) >= 16


@pytest.mark.parametrize("encoding, bad", [("TERN2", 0.5), ("EXP8", 0.75), ("EXP8", 2.0**64), ("EXP8", np.nan)])
def test_out_of_set_values_name_index(encoding, bad):
    w = np.zeros((2, 3))
    w[1, 2] = bad
    with pytest.raises(EncodingError, match=r"\(1, 2\)"):
        pack(w, encoding)


def test_reserved_codes_rejected():
    with pytest.raises(FormatError):
        unpack(PackedWeights("TERN2", 1, 1, bytes([0b10])))
    with pytest.raises(FormatError):
        unpack(PackedWeights("EXP8", 1, 1, bytes([0xFF])))


def test_exp8_full_exponent_range():
    w = np.ldexp(1.0, np.arange(-63, 64)).reshape(1, -1)
    assert np.array_equal(unpack(pack(w, "EXP8")), w)
    assert np.array_equal(unpack(pack(-w, "EXP8")), -w)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 9), st.integers(1, 13), st.integers(0, 2**32))
def test_pack_unpack_lossless(rows, cols, seed):
    g = np.random.default_rng(seed)
    for enc, w in (("TERN2", random_ternary(g, rows, cols)), ("EXP8", random_pow2(g, rows, cols, -63, 63)), ("F64", g.standard_normal((rows, cols)))):
        p = pack(w, enc)
        assert len(p.payload) == payload_size(enc, rows, cols)
        assert np.array_equal(unpack(p).view(np.uint64), (w + 0.0).view(np.uint64))


def test_ternary_matvec_cases():
    x = np.array([1.5, -2.0, 0.25])
    assert np.array_equal(matvec_ternary(pack(np.zeros((2, 3)), "TERN2"), x), np.zeros(2))
    assert np.array_equal(matvec_ternary(pack(np.eye(3), "TERN2"), x), x)


def test_shift_matvec_cases():
    x = np.array([[1.0, 2.0, -4.0], [0.5, 0.25, 3.0]])
    assert np.array_equal(matvec_shift(pack(np.ones((1, 3)), "EXP8"), x), x.sum(axis=1, keepdims=True))
    assert matvec_shift(pack(np.array([[0.5]]), "EXP8"), np.array([8.0])).tolist() == [4.0]


def test_shift_fallback_cases_still_match():
    # subnormal results, zeros and huge values go through ordinary scaling
    w = np.array([[2.0**-63, 2.0**63, -1.0, 0.0]])
    x = np.array([1e-300, 1e300, 0.0, 5.0])
    got = matvec_shift(pack(w, "EXP8"), x)
    assert np.array_equal(got, float_matvec(w, x))


def test_matvec_shape_checks():
    with pytest.raises(DimensionError):
        matvec_ternary(pack(np.zeros((2, 3)), "TERN2"), np.zeros(4))
    with pytest.raises(DimensionError):
        matvec_shift(pack(np.zeros((2, 3)), "EXP8"), np.zeros(2))


def test_ternary_matches_float_path_10k():
    g = np.random.default_rng(11)
    for _ in range(10_000):
        rows, cols = g.integers(1, 9, 2)
        w, x = random_ternary(g, rows, cols), g.uniform(-1, 1, cols)
        got = matvec_ternary(pack(w, "TERN2"), x)
        assert np.array_equal(got.view(np.uint64), float_matvec(w, x).view(np.uint64))


def test_shift_matches_float_path_10k():
    g = np.random.default_rng(12)
    for _ in range(10_000):
        rows, cols = g.integers(1, 9, 2)
        w, x = random_pow2(g, rows, cols), g.uniform(-1, 1, cols)
        got = matvec_shift(pack(w, "EXP8"), x)
        assert np.array_equal(got.view(np.uint64), float_matvec(w, x).view(np.uint64))


def test_batched_matvec_matches_rows():
    g = np.random.default_rng(13)
    w, x = random_pow2(g, 5, 7), g.standard_normal((4, 7))
    p = pack(w, "EXP8")
    assert np.array_equal(matvec(p, x), np.stack([matvec(p, row) for row in x]))


def test_container_round_trip(tmp_path):
    g = np.random.default_rng(14)
    tensors = {
        "tern": pack(random_ternary(g, 3, 5), "TERN2"),
        "exp": pack(random_pow2(g, 2, 9), "EXP8"),
        "full": g.standard_normal((4, 1)),
        "ünï": pack(np.zeros((1, 1)), "F64"),
    }
    export_model(tensors, tmp_path / "m.qrnn")
    back = import_model(tmp_path / "m.qrnn")
    assert list(back) == list(tensors)
    for name, value in tensors.items():
        expected = value if isinstance(value, PackedWeights) else pack(value, "F64")
        assert back[name] == expected
    export_model(back, tmp_path / "again.qrnn")
    assert (tmp_path / "m.qrnn").read_bytes() == (tmp_path / "again.qrnn").read_bytes()


def test_empty_container(tmp_path):
    export_model({}, tmp_path / "e.qrnn")
    raw = (tmp_path / "e.qrnn").read_bytes()
    assert raw == b"QRNN" + (1).to_bytes(4, "little") + (0).to_bytes(4, "little")
    assert import_model(tmp_path / "e.qrnn") == {}


def test_container_corruption(tmp_path):
    export_model({"w": pack(np.eye(2), "TERN2")}, tmp_path / "m.qrnn")
    raw = (tmp_path / "m.qrnn").read_bytes()
    cases = [raw[:-1], raw + b"\0", b"QRNX" + raw[4:], raw[:4] + (2).to_bytes(4, "little") + raw[8:]]
    for i, broken in enumerate(cases):
        (tmp_path / f"b{i}.qrnn").write_bytes(broken)
        with pytest.raises(FormatError):
            import_model(tmp_path / f"b{i}.qrnn")
