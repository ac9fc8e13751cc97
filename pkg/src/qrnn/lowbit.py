"""Packed quantized weights and multiplication-free matrix-vector kernels.

Encodings (rows are packed independently, row-major):

``TERN2``  2 bits per weight, weight j of a row in bits 2*(j % 4) of byte
           j // 4. Codes: 00 -> 0, 01 -> +1, 11 -> -1; 10 is invalid.
``EXP8``   1 byte per weight: bit 7 sign, bits 0-6 exponent + 63. Code 0x7F
           is exact zero; magnitudes 2**-63 .. 2**63.
``F64``    little-endian float64, for tensors kept in full precision.

The kernels never multiply a weight by an activation. TERN2 adds or
subtracts x_j. EXP8 writes ``exponent(x_j) + k`` into the exponent field of
x_j and flips the sign bit for negative weights; if x_j is zero, subnormal,
or the shifted exponent leaves the normal range, that term falls back to
``ldexp``. Terms are accumulated for j = 0, 1, ... exactly like
:func:`qrnn.tensor.matmul`, so both kernels agree bitwise with the float
product of the unpacked matrix.

Zero weights unpack as +0.0.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numba
import numpy as np

from .tensor import DimensionError, matmul

ENCODINGS = ("F64", "TERN2", "EXP8")
EXP_BIAS = 63
EXP_ZERO = 0x7F
MAGIC = b"QRNN"
VERSION = 1


class EncodingError(ValueError):
    """A value cannot be represented in the requested encoding."""


class FormatError(ValueError):
    """A packed payload or container file is malformed."""


@dataclass(frozen=True)
class PackedWeights:
    encoding: str
    rows: int
    cols: int
    payload: bytes

    def __post_init__(self):
        if self.encoding not in ENCODINGS:
            raise FormatError(f"unknown encoding {self.encoding!r}")
        if len(self.payload) != payload_size(self.encoding, self.rows, self.cols):
            raise FormatError(
                f"{self.encoding} payload for {self.rows}x{self.cols} must be "
                f"{payload_size(self.encoding, self.rows, self.cols)} bytes, got {len(self.payload)}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def row_bytes(self) -> int:
        return payload_size(self.encoding, 1, self.cols)

    def codes(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=np.uint8).reshape(self.rows, self.row_bytes())


def payload_size(encoding: str, rows: int, cols: int) -> int:
    if encoding == "TERN2":
        return rows * ((cols + 3) // 4)
    if encoding == "EXP8":
        return rows * cols
    return rows * cols * 8


def _first_bad(mask: np.ndarray) -> tuple[int, int]:
    i, j = np.argwhere(mask)[0]
    return int(i), int(j)


def pack(w, encoding: str) -> PackedWeights:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w.reshape(1, -1)
    if w.ndim != 2:
        raise DimensionError(f"pack expects a matrix, got shape {w.shape}")
    rows, cols = w.shape
    if encoding == "F64":
        return PackedWeights("F64", rows, cols, w.astype("<f8").tobytes())
    if encoding == "TERN2":
        bad = ~((w == 0) | (w == 1) | (w == -1))
        if bad.any():
            i, j = _first_bad(bad)
            raise EncodingError(f"TERN2 cannot store {w[i, j]!r} at index ({i}, {j})")
        codes = np.where(w == 1, 1, np.where(w == -1, 3, 0)).astype(np.uint8)
        padded = np.zeros((rows, 4 * ((cols + 3) // 4)), dtype=np.uint8)
        padded[:, :cols] = codes
        quads = padded.reshape(rows, -1, 4)
        packed = quads[..., 0] | (quads[..., 1] << 2) | (quads[..., 2] << 4) | (quads[..., 3] << 6)
        return PackedWeights("TERN2", rows, cols, packed.astype(np.uint8).tobytes())
    if encoding == "EXP8":
        mant, exp = np.frexp(np.abs(w))
        k = exp - 1
        ok = (w == 0) | ((mant == 0.5) & (k >= -EXP_BIAS) & (k <= EXP_BIAS))
        if not ok.all():
            i, j = _first_bad(~ok)
            raise EncodingError(f"EXP8 cannot store {w[i, j]!r} at index ({i}, {j})")
        codes = np.where(w == 0, EXP_ZERO, (k + EXP_BIAS) | np.where(w < 0, 0x80, 0))
        return PackedWeights("EXP8", rows, cols, codes.astype(np.uint8).tobytes())
    raise EncodingError(f"unknown encoding {encoding!r}")


def unpack(p: PackedWeights) -> np.ndarray:
    if p.encoding == "F64":
        return np.frombuffer(p.payload, dtype="<f8").astype(np.float64).reshape(p.rows, p.cols)
    raw = p.codes()
    if p.encoding == "TERN2":
        shifts = np.array([0, 2, 4, 6], dtype=np.uint8)
        codes = ((raw[:, :, None] >> shifts) & 3).reshape(p.rows, -1)[:, : p.cols]
        if (codes == 2).any():
            i, j = _first_bad(codes == 2)
            raise FormatError(f"invalid TERN2 code 10 at index ({i}, {j})")
        return np.select([codes == 1, codes == 3], [1.0, -1.0], 0.0)
    if (raw == 0xFF).any():
        i, j = _first_bad(raw == 0xFF)
        raise FormatError(f"invalid EXP8 code 0xFF at index ({i}, {j})")
    k = (raw & 0x7F).astype(np.int64) - EXP_BIAS
    mag = np.ldexp(1.0, k)
    return np.where(raw == EXP_ZERO, 0.0, np.where(raw & 0x80, -mag, mag))


@numba.njit(cache=True)
def _ternary_kernel(codes, x):
    batch, cols = x.shape
    rows = codes.shape[0]
    out = np.zeros((batch, rows))
    for b in range(batch):
        for i in range(rows):
            s = 0.0
            for j in range(cols):
                code = (codes[i, j >> 2] >> ((j & 3) << 1)) & 3
                if code == 1:
                    s += x[b, j]
                elif code == 3:
                    s -= x[b, j]
            out[b, i] = s
    return out


@numba.njit(cache=True)
def _shift_kernel(codes, xbits, x):
    batch, cols = x.shape
    rows = codes.shape[0]
    out = np.zeros((batch, rows))
    word = np.empty(1, np.uint64)
    as_float = word.view(np.float64)
    exp_mask = np.uint64(0x7FF) << np.uint64(52)
    sign_bit = np.uint64(1) << np.uint64(63)
    for b in range(batch):
        for i in range(rows):
            s = 0.0
            for j in range(cols):
                code = codes[i, j]
                if code == 0x7F:
                    continue
                bits = xbits[b, j]
                if (bits << np.uint64(1)) == 0:
                    # x_j is +-0: the term is a signed zero, which leaves s unchanged
                    continue
                k = np.int64(code & 0x7F) - 63
                e = np.int64((bits >> np.uint64(52)) & np.uint64(0x7FF))
                shifted = e + k
                if e != 0 and e != 2047 and 1 <= shifted <= 2046:
                    word[0] = (bits & ~exp_mask) | (np.uint64(shifted) << np.uint64(52))
                    if code & 0x80:
                        word[0] ^= sign_bit
                    s += as_float[0]
                else:
                    term = math.ldexp(x[b, j], k)
                    s += -term if code & 0x80 else term
            out[b, i] = s
    return out


def _batch(p: PackedWeights, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.ascontiguousarray(np.atleast_2d(x))
    if x.ndim != 2 or x.shape[1] != p.cols:
        raise DimensionError(f"matvec: weights are {p.rows}x{p.cols}, input has shape {x.shape}")
    return x, single


def matvec_ternary(p: PackedWeights, x) -> np.ndarray:
    """``W @ x`` for TERN2 weights using only additions and subtractions.

    ``x`` may be a vector or a batch of row vectors (B x cols).
    """
    if p.encoding != "TERN2":
        raise FormatError(f"matvec_ternary needs TERN2 weights, got {p.encoding}")
    x, single = _batch(p, x)
    out = _ternary_kernel(p.codes(), x)
    return out[0] if single else out


def matvec_shift(p: PackedWeights, x) -> np.ndarray:
    """``W @ x`` for EXP8 weights by exponent-field addition."""
    if p.encoding != "EXP8":
        raise FormatError(f"matvec_shift needs EXP8 weights, got {p.encoding}")
    x, single = _batch(p, x)
    if (p.codes() == 0xFF).any():
        raise FormatError("invalid EXP8 code 0xFF")
    out = _shift_kernel(p.codes(), x.view(np.uint64), x)
    return out[0] if single else out


def matvec(p: PackedWeights, x) -> np.ndarray:
    """Dispatch on encoding; F64 falls back to the float product."""
    if p.encoding == "TERN2":
        return matvec_ternary(p, x)
    if p.encoding == "EXP8":
        return matvec_shift(p, x)
    x, single = _batch(p, x)
    out = matmul(x, unpack(p).T)
    return out[0] if single else out


# ------------------------------------------------------------- container

_TAGS = {name: i for i, name in enumerate(ENCODINGS)}


def export_model(tensors: Mapping[str, object], path) -> None:
    """Write named tensors to a QRNN container.

    Values may be PackedWeights or float arrays (stored as F64). Layout,
    little-endian: ``b"QRNN"``, u32 version, u32 count, then per tensor
    u32 name length, UTF-8 name, u8 encoding tag (0 F64, 1 TERN2, 2 EXP8),
    u32 rows, u32 cols, payload.
    """
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        p = value if isinstance(value, PackedWeights) else pack(value, "F64")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<BII", _TAGS[p.encoding], p.rows, p.cols))
        chunks.append(p.payload)
    Path(path).write_bytes(b"".join(chunks))


def import_model(path) -> dict[str, PackedWeights]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated at byte {pos} (needed {n} more)")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError(f"{path}: not a QRNN container (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported QRNN version {version}")
    out: dict[str, PackedWeights] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: tensor name is not UTF-8") from exc
        tag, rows, cols = struct.unpack("<BII", take(9))
        if tag >= len(ENCODINGS):
            raise FormatError(f"{path}: unknown encoding tag {tag} for {name!r}")
        encoding = ENCODINGS[tag]
        out[name] = PackedWeights(encoding, rows, cols, take(payload_size(encoding, rows, cols)))
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out
