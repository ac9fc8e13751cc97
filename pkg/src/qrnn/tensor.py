"""Deterministic dense linear algebra and a portable seeded random source.

Tensors are plain 2-D ``float64`` numpy arrays (row-major). The matrix
product and the column reductions accumulate in a fixed left-to-right index
order, so results are bitwise reproducible and match a naive triple loop.

Random numbers come from SplitMix64 (Steele, Lea & Flood 2014)::

    state <- state + 0x9E3779B97F4A7C15            (mod 2**64)
    z <- state
    z <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9      (mod 2**64)
    z <- (z ^ (z >> 27)) * 0x94D049BB133111EB      (mod 2**64)
    output z ^ (z >> 31)

Uniform doubles are ``(output >> 11) * 2**-53`` and lie in [0, 1). Since
the generator is a hash of a counter, n draws are produced at once with
vectorized uint64 arithmetic. Test vector: seed 1234567 yields
6457827717110365317, 3203168211198807973, 9817491932198370423, ...
"""

from __future__ import annotations

import math

import numba
import numpy as np

Tensor = np.ndarray

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """An argument is outside its allowed range."""


class DataError(ValueError):
    """Inputs do not fit the model or dataset (token out of range, wrong width)."""


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """SplitMix64 finalizer applied to a single 64-bit integer."""
    return int(_mix64(np.array([value & _MASK64], dtype=np.uint64))[0])


class RandomSource:
    """Seeded SplitMix64 stream. Single owner; not thread-safe.

    Every draw advances an internal counter, so two sources built from the
    same seed produce bitwise-identical streams on every platform.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) <= _MASK64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._state = int(seed)

    def __repr__(self):
        return f"RandomSource(seed={self.seed})"

    def next_u64(self, n: int) -> np.ndarray:
        """Return the next ``n`` raw 64-bit outputs."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self._state) + steps * GOLDEN_GAMMA
            out = _mix64(z)
        self._state = (self._state + n * int(GOLDEN_GAMMA)) & _MASK64
        return out

    def random(self, shape=()) -> np.ndarray:
        """Uniform draws in [0, 1) with the given shape, filled row-major."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal draws via Box-Muller (cosine branch only)."""
        n = int(np.prod(shape, dtype=np.int64))
        u = self.random((n, 2))
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return (radius * np.cos(2.0 * math.pi * u[:, 1])).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of ``range(n)`` (stable argsort of uniforms)."""
        return np.argsort(self.random(n), kind="stable")

    def spawn(self, stream: int) -> "RandomSource":
        """Independent child source: seed = mix64(seed ^ mix64(stream + 1))."""
        return RandomSource(mix64(self.seed ^ mix64(stream + 1)))


def uniform_fill(rng: RandomSource, lo: float, hi: float, shape) -> Tensor:
    if not lo < hi:
        raise ParameterError(f"uniform_fill needs lo < hi, got [{lo}, {hi})")
    u = rng.random(shape)
    out = lo + (hi - lo) * u
    # lo + (hi-lo)*u can round up to hi when u is close to 1
    return np.where(out < hi, out, np.nextafter(hi, lo))


@numba.njit(cache=True)
def _matmul_kernel(a, b):
    # rows are processed four at a time so each b[p] row is loaded once per
    # block; every output still accumulates over p in ascending order
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    i = 0
    while i + 4 <= m:
        o0, o1, o2, o3 = out[i], out[i + 1], out[i + 2], out[i + 3]
        for p in range(k):
            a0, a1, a2, a3 = a[i, p], a[i + 1, p], a[i + 2, p], a[i + 3, p]
            bp = b[p]
            for j in range(n):
                bj = bp[j]
                o0[j] += a0 * bj
                o1[j] += a1 * bj
                o2[j] += a2 * bj
                o3[j] += a3 * bj
        i += 4
    while i < m:
        o = out[i]
        for p in range(k):
            aip = a[i, p]
            bp = b[p]
            for j in range(n):
                o[j] += aip * bp[j]
        i += 1
    return out


@numba.njit(cache=True)
def _colsum_kernel(a):
    m, n = a.shape
    out = np.zeros(n)
    for i in range(m):
        for j in range(n):
            out[j] += a[i, j]
    return out


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, each output summed over k = 0, 1, ... in order."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _matmul_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b))


def colsum(a: Tensor) -> Tensor:
    """Sum over rows (row 0 first), returned as a 1 x cols tensor."""
    a = _as_matrix(a, "a")
    return _colsum_kernel(np.ascontiguousarray(a)).reshape(1, -1)


def identity(n: int) -> Tensor:
    return np.eye(n, dtype=np.float64)


def relu(a: Tensor) -> Tensor:
    return np.maximum(a, 0.0)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function evaluated in the branch that never overflows."""
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(-np.abs(a))
    r = 1.0 / (1.0 + e)
    return np.where(a >= 0, r, e * r)


def tanh(a: Tensor) -> Tensor:
    return np.tanh(a)


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}
_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply a pointwise op. Binary ops require equal shapes."""
    a = np.asarray(a, dtype=np.float64)
    if op in _UNARY:
        if b is not None:
            raise ParameterError(f"{op} takes a single operand")
        return _UNARY[op](a)
    if op not in _BINARY:
        raise ParameterError(f"unknown elementwise op {op!r}")
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes differ, {a.shape} vs {b.shape}")
    return _BINARY[op](a, b)


def log_softmax_rows(a: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    shifted = a - a.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
