"""Weight rounding methods: ternarization, pow2-ternarization, exponential.

All functions are elementwise and accept scalars or arrays. Stochastic
methods draw one uniform per element from the supplied source, in row-major
order. Every returned zero is +0.0.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import ParameterError, RandomSource

# exponents are clamped so every quantized value fits the EXP8 packed code
EXP_MIN = -63
EXP_MAX = 63


@dataclass(frozen=True)
class QmfFormat:
    """Fixed-point format: ``m`` integer bits (sign included), ``f`` fractional bits.

    ``strict`` clips to the two's-complement range +/-(2**(m-1) - 2**-f)
    instead of the literal +/-2**m bound.
    """

    m: int
    f: int
    strict: bool = False

    def __post_init__(self):
        if self.m < 1 or self.f < 0:
            raise ParameterError(f"Q{self.m}.{self.f}: need m >= 1 and f >= 0")

    @property
    def step(self) -> float:
        return 2.0 ** -self.f

    @property
    def bound(self) -> float:
        if self.strict:
            return 2.0 ** (self.m - 1) - self.step
        return 2.0**self.m

    def __str__(self):
        return f"Q{self.m}.{self.f}" + (":strict" if self.strict else "")


class QuantDecision(NamedTuple):
    lower: np.ndarray
    upper: np.ndarray
    p: np.ndarray


_KINDS = (
    "none",
    "ternary-stochastic",
    "ternary-deterministic",
    "pow2-ternary",
    "exp-stochastic",
    "exp-deterministic",
)
_POW2_RE = re.compile(r"^pow2-ternary:Q(\d+)\.(\d+)(:strict)?$")


@dataclass(frozen=True)
class QuantMethod:
    kind: str
    fmt: QmfFormat | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ParameterError(f"unknown quantization method {self.kind!r}")
        if (self.kind == "pow2-ternary") != (self.fmt is not None):
            raise ParameterError("pow2-ternary requires a Qm.f format (and only it)")

    @classmethod
    def parse(cls, text: str) -> "QuantMethod":
        """Parse ``none``, ``exp-stochastic``, ``pow2-ternary:Q1.1[:strict]`` etc."""
        text = text.strip()
        match = _POW2_RE.match(text)
        if match:
            m, f, strict = match.groups()
            return cls("pow2-ternary", QmfFormat(int(m), int(f), strict is not None))
        if text == "pow2-ternary" or text not in _KINDS:
            raise ParameterError(
                f"unknown quantization method {text!r}; expected one of "
                "none, ternary-stochastic, ternary-deterministic, "
                "pow2-ternary:Qm.f[:strict], exp-stochastic, exp-deterministic"
            )
        return cls(text)

    def __str__(self):
        return f"pow2-ternary:{self.fmt}" if self.fmt else self.kind

    @property
    def stochastic(self) -> bool:
        return self.kind.endswith("-stochastic")

    def deterministic(self) -> "QuantMethod":
        """The test-time counterpart of this method."""
        if self.stochastic:
            return QuantMethod(self.kind.replace("-stochastic", "-deterministic"))
        return self


def _finite(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ParameterError("quantization input contains NaN or Inf")
    return w


def _out(x: np.ndarray):
    x = x + 0.0
    return float(x) if x.ndim == 0 else x


def ternarize_stochastic(w, rng: RandomSource):
    w = _finite(w)
    keep = rng.random(w.shape) < np.minimum(2.0 * np.abs(w), 1.0)
    return _out(np.where(keep, np.sign(w), 0.0))


def ternarize_deterministic(w):
    w = _finite(w)
    return _out(np.where(w > 0.5, 1.0, np.where(w <= -0.5, -1.0, 0.0)))


def round_half_away(x: np.ndarray) -> np.ndarray:
    whole = np.trunc(x)
    frac = x - whole
    return whole + np.where(np.abs(frac) >= 0.5, np.sign(x), 0.0)


def pow2_ternarize(w, fmt: QmfFormat):
    w = _finite(w)
    clipped = np.clip(w, -fmt.bound, fmt.bound)
    scale = 2.0**fmt.f
    return _out(round_half_away(clipped * scale) / scale)


def exp_decompose(w) -> QuantDecision:
    """Split |w| between the powers of two that bracket it.

    lower = sign(w) 2**e, upper = sign(w) 2**(e+1) with e = floor(log2|w|),
    and p = |w| / 2**e - 1 is the probability of taking ``upper``. Exact for
    every finite nonzero double (frexp avoids rounding in log2).
    """
    w = _finite(w)
    if np.any(w == 0):
        raise ParameterError("exp_decompose is undefined at w = 0")
    mant, exp = np.frexp(np.abs(w))
    sign = np.sign(w)
    lower = sign * np.ldexp(1.0, exp - 1)
    upper = sign * np.ldexp(1.0, exp)
    return QuantDecision(lower, upper, 2.0 * mant - 1.0)


def _exp_select(w: np.ndarray, take_upper) -> np.ndarray:
    mag = np.abs(w)
    nonzero = mag > 0
    mant, exp = np.frexp(np.where(nonzero, mag, 1.0))
    k = np.clip(exp - 1 + take_upper(2.0 * mant - 1.0), EXP_MIN, EXP_MAX)
    return np.where(nonzero, np.sign(w) * np.ldexp(1.0, k), 0.0)


def exp_quantize_stochastic(w, rng: RandomSource):
    w = _finite(w)
    u = rng.random(w.shape)
    return _out(_exp_select(w, lambda p: (u < p).astype(np.int64)))


def exp_quantize_deterministic(w):
    w = _finite(w)
    return _out(_exp_select(w, lambda p: (p > 0.5).astype(np.int64)))


def quantize_tensor(t, method: QuantMethod, rng: RandomSource | None = None) -> np.ndarray:
    """Apply ``method`` elementwise. ``none`` returns an identical copy."""
    t = np.asarray(t, dtype=np.float64)
    kind = method.kind
    if kind == "none":
        return t.copy()
    if method.stochastic and rng is None:
        raise ParameterError(f"{kind} needs a RandomSource")
    if kind == "ternary-stochastic":
        out = ternarize_stochastic(t, rng)
    elif kind == "ternary-deterministic":
        out = ternarize_deterministic(t)
    elif kind == "pow2-ternary":
        out = pow2_ternarize(t, method.fmt)
    elif kind == "exp-stochastic":
        out = exp_quantize_stochastic(t, rng)
    else:
        out = exp_quantize_deterministic(t)
    return np.asarray(out, dtype=np.float64).reshape(t.shape)


def in_value_set(values, method: QuantMethod) -> np.ndarray:
    """Elementwise membership test for a method's declared output set."""
    v = np.asarray(values, dtype=np.float64)
    kind = method.kind
    if kind == "none":
        return np.isfinite(v)
    if kind.startswith("ternary"):
        return (v == 0) | (v == 1) | (v == -1)
    if kind == "pow2-ternary":
        scaled = v * 2.0**method.fmt.f
        return (scaled == np.trunc(scaled)) & (np.abs(v) <= method.fmt.bound)
    mant, exp = np.frexp(np.abs(v))
    return (v == 0) | ((mant == 0.5) & (exp - 1 >= EXP_MIN) & (exp - 1 <= EXP_MAX))
