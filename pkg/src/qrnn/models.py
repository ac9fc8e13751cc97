"""Vanilla ReLU RNN language model and GRU sequence classifier.

Weight matrices are stored (out x in) and biases as 1 x n rows; a batch of
inputs is a B x in matrix and a layer computes ``x @ W.T + b``. Forward
functions take a *weights view*, a mapping from parameter name to either a
float tensor or a :class:`~qrnn.lowbit.PackedWeights`, so one code path
serves full-precision, quantized and packed evaluation.

The ``*_loss_and_grads`` functions run backpropagation through time and
return gradients with respect to the weights they were given.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from . import lowbit
from .tensor import (
    DataError,
    ParameterError,
    RandomSource,
    colsum,
    identity,
    log_softmax_rows,
    matmul,
    relu,
    sigmoid,
    uniform_fill,
)


def _dense(w) -> np.ndarray:
    return lowbit.unpack(w) if isinstance(w, lowbit.PackedWeights) else w


def _linear(w):
    """Return ``x -> x @ W.T`` for a float tensor or packed weights."""
    if isinstance(w, lowbit.PackedWeights):
        return lambda x: lowbit.matvec(w, x)
    wt = np.ascontiguousarray(np.asarray(w).T)
    return lambda x: matmul(x, wt)


def _view(weights) -> Mapping:
    return weights.params() if hasattr(weights, "params") else weights


class _Params:
    def params(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_params(self, values: Mapping[str, np.ndarray]):
        return type(self)(**{f.name: values[f.name] for f in fields(self)})

    @classmethod
    def param_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass
class VanillaRNNLM(_Params):
    W_xh: np.ndarray  # hidden x vocab
    W_hh: np.ndarray  # hidden x hidden
    b_h: np.ndarray
    W_hy: np.ndarray  # vocab x hidden
    b_y: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.W_hh.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.W_xh.shape[1]


@dataclass
class GRUClassifier(_Params):
    W_z: np.ndarray  # hidden x input
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray  # hidden x hidden
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray
    W_d: np.ndarray  # dense x hidden
    b_d: np.ndarray
    W_o: np.ndarray  # labels x dense
    b_o: np.ndarray

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.U_z.shape[0]

    @property
    def dense_size(self) -> int:
        return self.W_d.shape[0]

    @property
    def n_labels(self) -> int:
        return self.W_o.shape[0]


# parameter groups that the training loop may quantize
VANILLA_GROUPS = {
    "input": ("W_xh",),
    "recurrent": ("W_hh", "b_h"),
    "output": ("W_hy", "b_y"),
}
GRU_GROUPS = {
    "gru": ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"),
    "dense": ("W_d", "b_d"),
    "output": ("W_o", "b_o"),
}


def _check_sizes(**sizes):
    for name, value in sizes.items():
        if int(value) < 1:
            raise ParameterError(f"{name} must be >= 1, got {value}")


def init_vanilla(rng: RandomSource, vocab_size: int, hidden_size: int, init_scale: float = 0.01) -> VanillaRNNLM:
    """Identity recurrent matrix, uniform input/output weights, zero biases."""
    _check_sizes(vocab_size=vocab_size, hidden_size=hidden_size)
    s = init_scale
    return VanillaRNNLM(
        W_xh=uniform_fill(rng, -s, s, (hidden_size, vocab_size)),
        W_hh=identity(hidden_size),
        b_h=np.zeros((1, hidden_size)),
        W_hy=uniform_fill(rng, -s, s, (vocab_size, hidden_size)),
        b_y=np.zeros((1, vocab_size)),
    )


def glorot_uniform(rng: RandomSource, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return uniform_fill(rng, -bound, bound, (fan_out, fan_in))


def init_gru(rng: RandomSource, input_size: int, hidden_size: int, dense_size: int, n_labels: int) -> GRUClassifier:
    _check_sizes(input_size=input_size, hidden_size=hidden_size, dense_size=dense_size, n_labels=n_labels)
    d, h = input_size, hidden_size
    return GRUClassifier(
        W_z=glorot_uniform(rng, h, d),
        W_r=glorot_uniform(rng, h, d),
        W_h=glorot_uniform(rng, h, d),
        U_z=glorot_uniform(rng, h, h),
        U_r=glorot_uniform(rng, h, h),
        U_h=glorot_uniform(rng, h, h),
        b_z=np.zeros((1, h)),
        b_r=np.zeros((1, h)),
        b_h=np.zeros((1, h)),
        W_d=glorot_uniform(rng, dense_size, h),
        b_d=np.zeros((1, dense_size)),
        W_o=glorot_uniform(rng, n_labels, dense_size),
        b_o=np.zeros((1, n_labels)),
    )


# ---------------------------------------------------------------- vanilla


def _tokens(tokens, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise DataError(f"token index outside [0, {vocab_size})")
    return tokens


def _hidden0(h0, batch: int, size: int) -> np.ndarray:
    if h0 is None:
        return np.zeros((batch, size))
    h0 = np.asarray(h0, dtype=np.float64).reshape(-1, size)
    return np.broadcast_to(h0, (batch, size)).copy()


def _vanilla_unroll(w: Mapping, tokens: np.ndarray, h0):
    """Run the recurrence; returns (pre-activations, hidden states h_0..h_T)."""
    W_xh = _dense(w["W_xh"])
    rec = _linear(w["W_hh"])
    b_h = _dense(w["b_h"])
    batch, steps = tokens.shape
    hidden = W_xh.shape[0]
    hs = np.empty((batch, steps + 1, hidden))
    pre = np.empty((batch, steps, hidden))
    hs[:, 0] = _hidden0(h0, batch, hidden)
    for t in range(steps):
        a = W_xh.T[tokens[:, t]] + rec(hs[:, t]) + b_h
        pre[:, t] = a
        hs[:, t + 1] = relu(a)
    return pre, hs


def _vanilla_logits(w: Mapping, states: np.ndarray) -> np.ndarray:
    batch, steps, hidden = states.shape
    out = _linear(w["W_hy"])(states.reshape(-1, hidden)) + _dense(w["b_y"])
    return out.reshape(batch, steps, w["W_hy"].shape[0])


def vanilla_forward(weights, tokens, h0=None):
    """Consume ``tokens`` (T or B x T); return (logits per step, final hidden).

    Step t produces ``W_hy h_t + b_y`` with
    ``h_t = relu(W_xh[:, x_t] + W_hh h_{t-1} + b_h)``.
    """
    w = _view(weights)
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    tokens = _tokens(np.atleast_2d(tokens), w["W_xh"].shape[1])
    _, hs = _vanilla_unroll(w, tokens, h0)
    logits = _vanilla_logits(w, hs[:, 1:])
    if single:
        return logits[0], hs[0, -1]
    return logits, hs[:, -1]


def lm_logits(weights, chunks, h0=None) -> np.ndarray:
    """Next-character logits for every position of every chunk (B x L x V).

    Position 0 is predicted from ``h0`` alone; position t from h_t after
    reading characters 0..t-1.
    """
    w = _view(weights)
    chunks = _tokens(np.atleast_2d(chunks), w["W_xh"].shape[1])
    _, hs = _vanilla_unroll(w, chunks[:, :-1], h0)
    return _vanilla_logits(w, hs)


def _cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean NLL (nats) and its gradient w.r.t. the logits."""
    flat = logits.reshape(-1, logits.shape[-1])
    tgt = targets.reshape(-1)
    logp = log_softmax_rows(flat)
    picked = logp[np.arange(tgt.size), tgt]
    loss = -np.sum(picked) / tgt.size
    grad = np.exp(logp)
    grad[np.arange(tgt.size), tgt] -= 1.0
    return loss, (grad / tgt.size).reshape(logits.shape)


def _one_hot(indices: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((indices.size, n))
    out[np.arange(indices.size), indices.reshape(-1)] = 1.0
    return out


def vanilla_loss_and_grads(weights, chunks, h0=None):
    """Mean per-character cross-entropy of a chunk batch and its BPTT gradients."""
    w = _view(weights)
    vocab = w["W_xh"].shape[1]
    chunks = _tokens(np.atleast_2d(chunks), vocab)
    inputs = chunks[:, :-1]
    pre, hs = _vanilla_unroll(w, inputs, h0)
    logits = _vanilla_logits(w, hs)
    loss, dlogits = _cross_entropy(logits, chunks)

    batch, length, _ = hs.shape
    hidden = hs.shape[-1]
    flat_d = dlogits.reshape(-1, vocab)
    grads = {
        "W_hy": matmul(flat_d.T, hs.reshape(-1, hidden)),
        "b_y": colsum(flat_d),
    }
    dh_out = matmul(flat_d, w["W_hy"]).reshape(batch, length, hidden)

    steps = inputs.shape[1]
    da = np.zeros((batch, steps, hidden))
    carry = np.zeros((batch, hidden))
    for t in range(steps - 1, -1, -1):
        dh = dh_out[:, t + 1] + carry
        da[:, t] = dh * (pre[:, t] > 0)
        carry = matmul(da[:, t], w["W_hh"])
    flat_da = da.reshape(-1, hidden)
    grads["W_hh"] = matmul(flat_da.T, hs[:, :-1].reshape(-1, hidden))
    grads["b_h"] = colsum(flat_da)
    grads["W_xh"] = matmul(flat_da.T, _one_hot(inputs, vocab))
    return loss, grads


# -------------------------------------------------------------------- GRU


def _features(w: Mapping, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    width = w["W_z"].shape[1]
    if x.ndim != 3 or x.shape[2] != width:
        raise DataError(f"feature rows must have width {width}, got shape {x.shape}")
    return x


def _gru_unroll(w: Mapping, x: np.ndarray, h0):
    batch, steps, d = x.shape
    lin = {name: _linear(w[name]) for name in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h")}
    b_z, b_r, b_h = (_dense(w[n]) for n in ("b_z", "b_r", "b_h"))
    flat_x = x.reshape(-1, d)
    # input projections for all steps at once: B x T x H
    xz = (lin["W_z"](flat_x) + b_z).reshape(batch, steps, -1)
    xr = (lin["W_r"](flat_x) + b_r).reshape(batch, steps, -1)
    xh = (lin["W_h"](flat_x) + b_h).reshape(batch, steps, -1)
    hidden = xz.shape[-1]
    hs = np.empty((batch, steps + 1, hidden))
    zs = np.empty((batch, steps, hidden))
    rs = np.empty_like(zs)
    cs = np.empty_like(zs)
    hs[:, 0] = _hidden0(h0, batch, hidden)
    for t in range(steps):
        h = hs[:, t]
        z = sigmoid(xz[:, t] + lin["U_z"](h))
        r = sigmoid(xr[:, t] + lin["U_r"](h))
        c = np.tanh(xh[:, t] + lin["U_h"](r * h))
        hs[:, t + 1] = (1.0 - z) * h + z * c
        zs[:, t], rs[:, t], cs[:, t] = z, r, c
    return hs, zs, rs, cs


def _gru_head(w: Mapping, h_final: np.ndarray):
    dense_pre = _linear(w["W_d"])(h_final) + _dense(w["b_d"])
    dense = relu(dense_pre)
    logits = _linear(w["W_o"])(dense) + _dense(w["b_o"])
    return dense_pre, dense, logits


def gru_forward(weights, features, h0=None):
    """Run the GRU over ``features`` (T x d or B x T x d).

    Returns (final hidden state, class log-probabilities).
    """
    w = _view(weights)
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 2
    x = _features(w, x)
    hs, *_ = _gru_unroll(w, x, h0)
    _, _, logits = _gru_head(w, hs[:, -1])
    logp = log_softmax_rows(logits)
    if single:
        return hs[0, -1], logp[0]
    return hs[:, -1], logp


def gru_loss_and_grads(weights, features, labels, h0=None):
    """Mean cross-entropy over the batch and its BPTT gradients."""
    w = _view(weights)
    x = _features(w, features)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, steps, d = x.shape
    hs, zs, rs, cs = _gru_unroll(w, x, h0)
    dense_pre, dense, logits = _gru_head(w, hs[:, -1])
    loss, dlogits = _cross_entropy(logits, labels)

    grads = {"W_o": matmul(dlogits.T, dense), "b_o": colsum(dlogits)}
    d_dense = matmul(dlogits, w["W_o"]) * (dense_pre > 0)
    grads["W_d"] = matmul(d_dense.T, hs[:, -1])
    grads["b_d"] = colsum(d_dense)
    dh = matmul(d_dense, w["W_d"])

    hidden = hs.shape[-1]
    da_z = np.empty((batch, steps, hidden))
    da_r = np.empty_like(da_z)
    da_h = np.empty_like(da_z)
    for t in range(steps - 1, -1, -1):
        h_prev, z, r, c = hs[:, t], zs[:, t], rs[:, t], cs[:, t]
        dc = dh * z
        dz = dh * (c - h_prev)
        d_prev = dh * (1.0 - z)
        ah = dc * (1.0 - c * c)
        d_rh = matmul(ah, w["U_h"])
        ar = d_rh * h_prev * r * (1.0 - r)
        az = dz * z * (1.0 - z)
        d_prev = d_prev + d_rh * r + matmul(az, w["U_z"]) + matmul(ar, w["U_r"])
        da_z[:, t], da_r[:, t], da_h[:, t] = az, ar, ah
        dh = d_prev

    flat_x = x.reshape(-1, d)
    flat_prev = hs[:, :-1].reshape(-1, hidden)
    flat_rh = (rs * hs[:, :-1]).reshape(-1, hidden)
    for gate, da in (("z", da_z), ("r", da_r), ("h", da_h)):
        flat = da.reshape(-1, hidden)
        flat_t = np.ascontiguousarray(flat.T)
        grads["W_" + gate] = matmul(flat_t, flat_x)
        grads["U_" + gate] = matmul(flat_t, flat_rh if gate == "h" else flat_prev)
        grads["b_" + gate] = colsum(flat)
    return loss, grads
