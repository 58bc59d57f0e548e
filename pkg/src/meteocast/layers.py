"""Forward and analytic backward passes for the network's layers.

Every layer works on batched arrays shaped ``[B, T, features]``; the
unbatched ``[T, features]`` form is accepted too and returned unbatched.
Forward functions return ``(output, cache)`` and the matching ``*_backward``
function turns an upstream gradient plus that cache into a
:class:`LayerGrads`.

LSTM gate order inside the packed ``4*H`` axis is (input, forget, cell,
output) and is part of the checkpoint format.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ._kernels import lstm_recurrence, lstm_recurrence_backward
from .exceptions import ConfigurationError, ShapeError, StateError
from .numerics import sigmoid, softmax

GATE_ORDER = ("input", "forget", "cell", "output")
ATTENTION_HIDDEN = 64


@dataclass
class DenseParams:
    weights: np.ndarray  # [in, out]
    bias: np.ndarray  # [out]

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"dense weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def n_in(self) -> int:
        return self.weights.shape[0]

    @property
    def n_out(self) -> int:
        return self.weights.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}


@dataclass
class LstmParams:
    input_kernel: np.ndarray  # [in, 4H]
    recurrent_kernel: np.ndarray  # [H, 4H]
    bias: np.ndarray  # [4H]

    def __post_init__(self):
        H = self.recurrent_kernel.shape[0]
        if (
            self.recurrent_kernel.shape != (H, 4 * H)
            or self.input_kernel.ndim != 2
            or self.input_kernel.shape[1] != 4 * H
            or self.bias.shape != (4 * H,)
        ):
            raise ShapeError(
                "inconsistent LSTM parameter shapes: "
                f"input {self.input_kernel.shape}, recurrent {self.recurrent_kernel.shape}, "
                f"bias {self.bias.shape}"
            )

    @property
    def units(self) -> int:
        return self.recurrent_kernel.shape[0]

    @property
    def n_in(self) -> int:
        return self.input_kernel.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "input_kernel": self.input_kernel,
            "recurrent_kernel": self.recurrent_kernel,
            "bias": self.bias,
        }


@dataclass
class LayerGrads:
    """Parameter gradients keyed like ``params.arrays()`` plus the input gradient."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    input_grad: np.ndarray | None = None


def glorot_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def init_dense(rng, n_in: int, n_out: int) -> DenseParams:
    return DenseParams(glorot_uniform(rng, n_in, n_out), np.zeros(n_out))


def init_lstm(rng, n_in: int, units: int, forget_bias: float = 1.0) -> LstmParams:
    bias = np.zeros(4 * units)
    bias[units : 2 * units] = forget_bias
    return LstmParams(
        glorot_uniform(rng, n_in, 4 * units),
        glorot_uniform(rng, units, 4 * units),
        bias,
    )


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeError(f"expected [T, F] or [B, T, F] input, got shape {x.shape}")
    return x, False


# --------------------------------------------------------------------------
# LSTM cell and sequence


def lstm_cell_step(x_t, h_prev, c_prev, p: LstmParams):
    """One LSTM step; inputs may be ``[in]`` vectors or ``[B, in]`` batches.

    Returns ``(h_t, c_t)``.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    H = p.units
    if x_t.shape[-1] != p.n_in or h_prev.shape[-1] != H or c_prev.shape != h_prev.shape:
        raise ShapeError(
            f"cell step shapes x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"do not match in={p.n_in}, H={H}"
        )
    z = x_t @ p.input_kernel + h_prev @ p.recurrent_kernel + p.bias
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H : 2 * H])
    g = np.tanh(z[..., 2 * H : 3 * H])
    o = sigmoid(z[..., 3 * H :])
    c_t = f * c_prev + i * g
    h_t = o * np.tanh(c_t)
    return h_t, c_t


def lstm_cell_backward(dh, dc, x_t, h_prev, c_prev, p: LstmParams) -> LayerGrads:
    """Gradients of one cell step given upstream ``dh`` and ``dc`` on its outputs.

    ``input_grad`` is the gradient w.r.t. ``x_t``; the state gradients are in
    ``params["h_prev"]`` and ``params["c_prev"]`` next to the weight grads.
    """
    x_t, h_prev, c_prev = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (x_t, h_prev, c_prev))
    dh, dc = np.atleast_2d(dh), np.atleast_2d(dc)
    H = p.units
    z = x_t @ p.input_kernel + h_prev @ p.recurrent_kernel + p.bias
    i, f, o = expit(z[:, :H]), expit(z[:, H : 2 * H]), expit(z[:, 3 * H :])
    g = np.tanh(z[:, 2 * H : 3 * H])
    tc = np.tanh(f * c_prev + i * g)
    dc_total = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dc_total * g * i * (1 - i),
        dc_total * c_prev * f * (1 - f),
        dc_total * i * (1 - g * g),
        dh * tc * o * (1 - o),
    ], axis=1)
    squeeze = (lambda a: a[0]) if dh.shape[0] == 1 else (lambda a: a)
    return LayerGrads(
        {
            "input_kernel": x_t.T @ dz,
            "recurrent_kernel": h_prev.T @ dz,
            "bias": dz.sum(axis=0),
            "h_prev": squeeze(dz @ p.recurrent_kernel.T),
            "c_prev": squeeze(dc_total * f),
        },
        squeeze(dz @ p.input_kernel.T),
    )


@dataclass
class _LstmCache:
    x: np.ndarray  # [B, T, in], already in processing order
    gates: np.ndarray  # [B, T, 4H] post-activation
    c: np.ndarray  # [B, T+1, H], c[:, 0] = 0
    h: np.ndarray  # [B, T+1, H], h[:, 0] = 0
    tanh_c: np.ndarray  # [B, T, H]
    reverse: bool
    unbatched: bool


def lstm_sequence_forward(seq, p: LstmParams, reverse: bool = False):
    """Run an LSTM over ``seq`` from zero initial state.

    Outputs are always in the original temporal order, also for
    ``reverse=True``. Returns ``(hidden [.., T, H], cache)``.
    """
    x, unbatched = _batched(seq)
    B, T, n_in = x.shape
    if T == 0:
        raise ShapeError("LSTM input sequence is empty")
    if n_in != p.n_in:
        raise ShapeError(f"LSTM expects {p.n_in} input features, got {n_in}")
    if reverse:
        x = x[:, ::-1]
    H = p.units
    x = np.ascontiguousarray(x)
    zx = (x.reshape(B * T, n_in) @ p.input_kernel).reshape(B, T, 4 * H) + p.bias
    gates = np.empty((B, T, 4 * H))
    c = np.zeros((B, T + 1, H))
    h = np.zeros((B, T + 1, H))
    tanh_c = np.empty((B, T, H))
    lstm_recurrence(zx, np.ascontiguousarray(p.recurrent_kernel), gates, c, h, tanh_c)
    out = h[:, 1:]
    if reverse:
        out = out[:, ::-1]
    out = np.ascontiguousarray(out)
    cache = _LstmCache(x, gates, c, h, tanh_c, reverse, unbatched)
    return (out[0] if unbatched else out), cache


def lstm_sequence_backward(upstream, cache: _LstmCache, p: LstmParams) -> LayerGrads:
    """Backpropagation through time for :func:`lstm_sequence_forward`."""
    if cache is None:
        raise StateError("LSTM backward called without a forward cache")
    dh_all, _ = _batched(upstream)
    x, gates, c, h, tanh_c = cache.x, cache.gates, cache.c, cache.h, cache.tanh_c
    B, T, n_in = x.shape
    H = p.units
    if dh_all.shape != (B, T, H):
        raise ShapeError(f"upstream gradient {dh_all.shape} does not match {(B, T, H)}")
    if cache.reverse:
        dh_all = dh_all[:, ::-1]
    dz = np.empty((B, T, 4 * H))
    lstm_recurrence_backward(np.ascontiguousarray(dh_all), np.ascontiguousarray(p.recurrent_kernel),
                             gates, c, tanh_c, dz)
    dz_flat = dz.reshape(B * T, 4 * H)
    grads = {
        "input_kernel": x.reshape(B * T, n_in).T @ dz_flat,
        "recurrent_kernel": h[:, :T].reshape(B * T, H).T @ dz_flat,
        "bias": dz_flat.sum(axis=0),
    }
    dx = (dz_flat @ p.input_kernel.T).reshape(B, T, n_in)
    if cache.reverse:
        dx = dx[:, ::-1]
    dx = np.ascontiguousarray(dx)
    return LayerGrads(grads, dx[0] if cache.unbatched else dx)


# --------------------------------------------------------------------------
# Bidirectional wrapper


def bilstm_forward(seq, fwd: LstmParams, bwd: LstmParams):
    """Concatenate forward and backward LSTM states per timestep -> ``[.., T, 2H]``."""
    if fwd.units != bwd.units:
        raise ConfigurationError(
            f"forward ({fwd.units}) and backward ({bwd.units}) LSTM sizes differ"
        )
    hf, cf = lstm_sequence_forward(seq, fwd, reverse=False)
    hb, cb = lstm_sequence_forward(seq, bwd, reverse=True)
    return np.concatenate([hf, hb], axis=-1), (cf, cb)


def bilstm_backward(upstream, cache, fwd: LstmParams, bwd: LstmParams):
    """Returns ``(forward grads, backward grads, input grad)``."""
    if cache is None:
        raise StateError("BiLSTM backward called without a forward cache")
    cf, cb = cache
    H = fwd.units
    upstream = np.asarray(upstream, dtype=np.float64)
    gf = lstm_sequence_backward(upstream[..., :H], cf, fwd)
    gb = lstm_sequence_backward(upstream[..., H:], cb, bwd)
    return gf, gb, gf.input_grad + gb.input_grad


# --------------------------------------------------------------------------
# Dropout


def dropout_apply(x, rate: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout; returns ``(y, mask)`` with ``mask`` of 0/1 entries."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not training or rate == 0.0:
        return x.copy(), np.ones_like(x)
    if rng is None:
        raise ConfigurationError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate).astype(np.float64)
    return x * mask / (1.0 - rate), mask


def dropout_backward(upstream, mask: np.ndarray, rate: float) -> LayerGrads:
    if mask is None:
        raise StateError("dropout backward called without a mask")
    if np.all(mask == 1.0):
        return LayerGrads({}, np.array(upstream, dtype=np.float64))
    return LayerGrads({}, upstream * mask / (1.0 - rate))


# --------------------------------------------------------------------------
# Attention


@dataclass
class _AttentionCache:
    h: np.ndarray  # [B, T, D]
    hidden: np.ndarray  # tanh activations [B, T, 64]
    weights: np.ndarray  # [B, T]
    unbatched: bool


def attention_apply(h, score1: DenseParams, score2: DenseParams):
    """Per-timestep scoring, softmax over time and reweighting of ``h``.

    Scores are ``score2(tanh(score1(h_t)))``; the weighted sequence keeps its
    time axis. Returns ``(weighted, weights, cache)``.
    """
    x, unbatched = _batched(h)
    B, T, D = x.shape
    if score1.n_in != D or score2.n_in != score1.n_out or score2.n_out != 1:
        raise ShapeError(
            f"attention scorer {score1.n_in}->{score1.n_out}->{score2.n_out} "
            f"does not fit input width {D}"
        )
    hidden = np.tanh(x @ score1.weights + score1.bias)
    scores = (hidden @ score2.weights)[..., 0] + score2.bias[0]
    weights = softmax(scores, axis=1)
    weighted = x * weights[..., None]
    cache = _AttentionCache(x, hidden, weights, unbatched)
    if unbatched:
        return weighted[0], weights[0], cache
    return weighted, weights, cache


def attention_backward(upstream, cache: _AttentionCache, score1: DenseParams,
                       score2: DenseParams) -> tuple[LayerGrads, LayerGrads, np.ndarray]:
    """Returns ``(score1 grads, score2 grads, input grad)``."""
    if cache is None:
        raise StateError("attention backward called without a forward cache")
    dout, _ = _batched(upstream)
    x, hidden, w = cache.h, cache.hidden, cache.weights
    B, T, D = x.shape
    dx = dout * w[..., None]
    dw = np.einsum("btd,btd->bt", dout, x)
    # softmax Jacobian (diag(w) - w w^T) applied to dw
    ds = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
    K = hidden.shape[-1]
    hid_flat = hidden.reshape(B * T, K)
    ds_flat = ds.reshape(B * T)
    g2 = {"weights": (hid_flat.T @ ds_flat)[:, None], "bias": np.array([ds_flat.sum()])}
    dpre = (ds[..., None] * score2.weights[:, 0]) * (1.0 - hidden * hidden)
    dpre_flat = dpre.reshape(B * T, K)
    g1 = {"weights": x.reshape(B * T, D).T @ dpre_flat, "bias": dpre_flat.sum(axis=0)}
    dx = dx + dpre @ score1.weights.T
    if cache.unbatched:
        dx = dx[0]
    return LayerGrads(g1), LayerGrads(g2), dx


# --------------------------------------------------------------------------
# Time-distributed dense head


def time_distributed_dense(h, p: DenseParams):
    """Apply the same affine map at every timestep; linear output."""
    x = np.asarray(h, dtype=np.float64)
    if x.shape[-1] != p.n_in:
        raise ShapeError(f"dense layer expects width {p.n_in}, got input {x.shape}")
    return x @ p.weights + p.bias, x


def time_distributed_dense_backward(upstream, cache, p: DenseParams) -> LayerGrads:
    if cache is None:
        raise StateError("dense backward called without a forward cache")
    x = cache
    dy = np.asarray(upstream, dtype=np.float64)
    xf = x.reshape(-1, p.n_in)
    dyf = dy.reshape(-1, p.n_out)
    return LayerGrads(
        {"weights": xf.T @ dyf, "bias": dyf.sum(axis=0)},
        dy @ p.weights.T,
    )
