"""Small deterministic float32 kernels for inference.

Every function is pure.  Reductions go through numpy/BLAS on fixed shapes,
so the accumulation order depends only on the operand shapes; callers that
need bit-reproducibility across processes pin BLAS to one thread (see
``single_threaded_blas``).

Matrix layout: dense weights are stored ``[in, out]`` and applied as
``x @ W``; recurrent weights likewise ``[in, gates * hidden]`` with PyTorch
gate order (GRU: r, z, n; LSTM: i, f, g, o).
"""
from __future__ import annotations

import hashlib
from contextlib import contextmanager
from typing import Iterable, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch

F32 = np.float32


@contextmanager
def single_threaded_blas():
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1, user_api="blas"):
        yield


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=F32)


# -- elementwise -----------------------------------------------------------------


def relu(x):
    return np.maximum(_f32(x), F32(0))


def tanh_op(x):
    return np.tanh(_f32(x))


def sigmoid(x):
    x = _f32(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, F32(1) / (F32(1) + e), e / (F32(1) + e)).astype(F32)


def softmax(x):
    # evaluated in float64 and rounded once, so each output is within half an ulp
    z = np.asarray(x, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / np.sum(e, axis=-1, keepdims=True)).astype(F32)


def linear(x, w, b=None):
    x, w = _f32(x), _f32(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: input width {x.shape[-1]} vs weight {w.shape}")
    y = x @ w
    if b is not None:
        y = y + _f32(b)
    return y


def batch_norm_inference(x, mean, var, gamma, beta, eps: float = 1e-5, axis: int = 0):
    """Normalize ``x`` per channel along ``axis`` with stored statistics."""
    x = _f32(x)
    shape = [1] * x.ndim
    shape[axis] = -1
    if x.shape[axis] != np.size(mean):
        raise ShapeMismatch(f"batch norm: {x.shape[axis]} channels vs {np.size(mean)} statistics")
    scale = _f32(gamma) / np.sqrt(_f32(var) + F32(eps))
    return (x - _f32(mean).reshape(shape)) * scale.reshape(shape) + _f32(beta).reshape(shape)


# -- convolution -----------------------------------------------------------------


def _ceil_pad(n: int, k: int, stride: int) -> tuple[int, int, int]:
    """Output length and (before, after) zero padding.

    Output position o is centred on input index ``o * stride``.
    """
    out = -(-n // stride)
    before = (k - 1) // 2
    after = max((out - 1) * stride + k - before - n, 0)
    return out, before, after


def conv2d(x, kernel, bias=None, stride: tuple[int, int] = (2, 2)):
    """2-D convolution with "same-ceil" zero padding.

    x: [C_in, H, W]; kernel: [C_out, C_in, kh, kw] (odd sizes);
    returns [C_out, ceil(H / sh), ceil(W / sw)].
    """
    x, kernel = _f32(x), _f32(kernel)
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    _, H, W = x.shape
    sh, sw = stride
    ho, ph0, ph1 = _ceil_pad(H, kh, sh)
    wo, pw0, pw1 = _ceil_pad(W, kw, sw)
    xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :ho, :wo]
    # [ho, wo, c_in, kh, kw] columns against [c_in*kh*kw, c_out]
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c_in * kh * kw)
    y = cols @ kernel.reshape(c_out, -1).T
    if bias is not None:
        y = y + _f32(bias)
    return np.ascontiguousarray(y.T).reshape(c_out, ho, wo)


def conv1d(x, kernel, bias=None):
    """Stride-1 convolution over time with symmetric "same" padding.

    x: [T, C_in] (time-major); kernel: [C_out, C_in, k], k odd; returns [T, C_out].
    """
    x, kernel = _f32(x), _f32(kernel)
    if x.ndim != 2 or kernel.ndim != 3 or kernel.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"conv1d: input {x.shape} vs kernel {kernel.shape}")
    c_out, c_in, k = kernel.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((pad, k - 1 - pad), (0, 0)))
    cols = sliding_window_view(xp, k, axis=0)  # [T, C_in, k]
    y = cols.reshape(x.shape[0], c_in * k) @ kernel.reshape(c_out, c_in * k).T
    if bias is not None:
        y = y + _f32(bias)
    return y


# -- recurrences ----------------------------------------------------------------


class GRUParams(NamedTuple):
    w_ih: np.ndarray  # [D_in, 3H]
    w_hh: np.ndarray  # [H, 3H]
    b_ih: np.ndarray  # [3H]
    b_hh: np.ndarray  # [3H]


class LSTMParams(NamedTuple):
    w_ih: np.ndarray  # [D_in, 4H]
    w_hh: np.ndarray  # [H, 4H]
    b_ih: np.ndarray  # [4H]
    b_hh: np.ndarray  # [4H]


def _check_rnn(inputs, params, gates):
    hidden = params.w_hh.shape[0]
    if (params.w_ih.shape[1] != gates * hidden or params.w_hh.shape[1] != gates * hidden
            or inputs.shape[-1] != params.w_ih.shape[0]):
        raise ShapeMismatch("recurrent weights do not match input/hidden sizes")
    return hidden


def gru_cell(x, h, params: GRUParams):
    H = params.w_hh.shape[0]
    gi = _f32(x) @ params.w_ih + params.b_ih
    gh = h @ params.w_hh + params.b_hh
    r = sigmoid(gi[:H] + gh[:H])
    z = sigmoid(gi[H : 2 * H] + gh[H : 2 * H])
    n = np.tanh(gi[2 * H :] + r * gh[2 * H :])
    return (F32(1) - z) * n + z * h


def gru_forward(inputs, params: GRUParams, h0=None):
    """Run a GRU over ``inputs`` [T, D_in]; returns (outputs [T, H], final state [H])."""
    inputs = _f32(inputs)
    H = _check_rnn(inputs, params, 3)
    h = np.zeros(H, F32) if h0 is None else _f32(h0)
    gi_all = inputs @ params.w_ih + params.b_ih
    outputs = np.empty((inputs.shape[0], H), F32)
    for t in range(inputs.shape[0]):
        gi = gi_all[t]
        gh = h @ params.w_hh + params.b_hh
        r = sigmoid(gi[:H] + gh[:H])
        z = sigmoid(gi[H : 2 * H] + gh[H : 2 * H])
        n = np.tanh(gi[2 * H :] + r * gh[2 * H :])
        h = (F32(1) - z) * n + z * h
        outputs[t] = h
    return outputs, h


def _lstm_gates(g, c, H):
    i = sigmoid(g[:H])
    f = sigmoid(g[H : 2 * H])
    cand = np.tanh(g[2 * H : 3 * H])
    o = sigmoid(g[3 * H :])
    c = f * c + i * cand
    return o * np.tanh(c), c


def lstm_cell(x, state, params: LSTMParams):
    """One LSTM step; ``state`` is (h, c)."""
    h, c = state
    H = params.w_hh.shape[0]
    g = _f32(x) @ params.w_ih + params.b_ih + (h @ params.w_hh + params.b_hh)
    return _lstm_gates(g, c, H)


def lstm_forward(inputs, params: LSTMParams, state0=None):
    """Run an LSTM over ``inputs`` [T, D_in]; returns (outputs [T, H], (h, c))."""
    inputs = _f32(inputs)
    H = _check_rnn(inputs, params, 4)
    if state0 is None:
        h, c = np.zeros(H, F32), np.zeros(H, F32)
    else:
        h, c = _f32(state0[0]), _f32(state0[1])
    gi_all = inputs @ params.w_ih + params.b_ih
    outputs = np.empty((inputs.shape[0], H), F32)
    for t in range(inputs.shape[0]):
        g = gi_all[t] + (h @ params.w_hh + params.b_hh)
        h, c = _lstm_gates(g, c, H)
        outputs[t] = h
    return outputs, (h, c)


# -- attention ------------------------------------------------------------------


def dot_attention(query, keys, values, w_query, w_key):
    """Scaled dot-product attention of one query over N keys.

    query [D_q] @ w_query [D_q, A] and keys [N, D_k] @ w_key [D_k, A] meet in
    the common space of width A.  Returns (context [D_v], weights [N]).
    """
    query, keys, values = _f32(query), _f32(keys), _f32(values)
    w_query, w_key = _f32(w_query), _f32(w_key)
    if (query.shape[-1] != w_query.shape[0] or keys.shape[-1] != w_key.shape[0]
            or w_query.shape[1] != w_key.shape[1] or keys.shape[0] != values.shape[0]):
        raise ShapeMismatch("dot_attention: projection shapes do not line up")
    q = query @ w_query
    k = keys @ w_key
    scores = (k @ q) / F32(np.sqrt(w_key.shape[1]))
    weights = softmax(scores)
    return weights @ values, weights


# -- initialization ----------------------------------------------------------------


class SeededRng:
    """Name-salted PCG64 streams.

    ``stream(name)`` is seeded from ``SeedSequence(seed, spawn_key=sha256(name))``
    so every tensor gets its own reproducible stream, independent of the order
    in which tensors are created.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & (2**64 - 1)

    def stream(self, name: str) -> np.random.Generator:
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        salt = tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=salt)))


def fan_in_out(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    # conv kernels [C_out, C_in, *k]
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


def init_weights(manifest: Iterable[tuple[str, tuple[int, ...]]], rng: SeededRng) -> dict[str, np.ndarray]:
    """Glorot-uniform tensors, U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    out = {}
    for name, shape in manifest:
        fi, fo = fan_in_out(tuple(shape))
        a = np.sqrt(6.0 / (fi + fo))
        out[name] = rng.stream(name).uniform(-a, a, size=shape).astype(F32)
    return out
