"""The attention BiLSTM forecaster: assembly, batched forward/backward, loss, checkpoints.

Pipeline per sample: ``n_bilstm_layers`` x (BiLSTM -> dropout), attention
reweighting over time, then a time-distributed linear head with 3 outputs
(temperature, irradiance, relative humidity, in scaled space).

Checkpoint layout (little-endian)::

    b"MCASTCKP"            8-byte magic
    uint32                 format version
    uint64                 header length N
    N bytes                UTF-8 JSON header
    float64 * P            parameter blob, arrays in ``named_parameters`` order

The header carries hparams, scalers, seed, the RNG algorithm, a manifest of
``(name, shape)`` entries and a SHA-256 of the blob.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import layers as L
from .data import N_FEATURES, N_TARGETS, Scaler
from .exceptions import ConfigurationError, FormatError, ShapeError
from .numerics import RNG_ALGORITHM, make_rng

CHECKPOINT_MAGIC = b"MCASTCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HParams:
    n_past: int = 22
    n_future: int = 48
    learning_rate: float = 0.0031
    dropout_rate: float = 0.053
    n_bilstm_layers: int = 2
    units_per_direction: int = 8
    batch_size: int = 64

    def __post_init__(self):
        problems = []
        if self.n_past < 1:
            problems.append(f"n_past={self.n_past} < 1")
        if self.n_future < 1:
            problems.append(f"n_future={self.n_future} < 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append(f"dropout_rate={self.dropout_rate} outside [0, 1)")
        if self.n_bilstm_layers < 1:
            problems.append(f"n_bilstm_layers={self.n_bilstm_layers} < 1")
        if self.units_per_direction < 1:
            problems.append(f"units_per_direction={self.units_per_direction} < 1")
        if self.batch_size < 1:
            problems.append(f"batch_size={self.batch_size} < 1")
        if not self.learning_rate > 0:
            problems.append(f"learning_rate={self.learning_rate} must be positive")
        if problems:
            raise ConfigurationError("invalid hyperparameters: " + "; ".join(problems))

    @property
    def timesteps(self) -> int:
        return self.n_past + self.n_future


# Hyperparameters reported as the tuned optimum.
TUNED_HPARAMS = HParams()


@dataclass
class ForecastNet:
    hparams: HParams
    bilstm: list[tuple[L.LstmParams, L.LstmParams]]
    attention: tuple[L.DenseParams, L.DenseParams]
    head: L.DenseParams
    scalers: tuple[Scaler, ...] | None = None
    seed: int = 0
    rng_algorithm: str = RNG_ALGORITHM
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        h = self.hparams
        if len(self.bilstm) != h.n_bilstm_layers:
            raise ConfigurationError(
                f"network has {len(self.bilstm)} BiLSTM layers, hparams say {h.n_bilstm_layers}"
            )
        width = N_FEATURES
        for k, (fwd, bwd) in enumerate(self.bilstm):
            for p in (fwd, bwd):
                if p.n_in != width or p.units != h.units_per_direction:
                    raise ShapeError(f"BiLSTM layer {k} has wrong shapes")
            width = 2 * h.units_per_direction
        s1, s2 = self.attention
        if s1.n_in != width or s1.n_out != L.ATTENTION_HIDDEN or s2.n_in != L.ATTENTION_HIDDEN or s2.n_out != 1:
            raise ShapeError("attention scorer does not match BiLSTM width")
        if self.head.n_in != width or self.head.n_out != N_TARGETS:
            raise ShapeError(f"head must map {width} -> {N_TARGETS}")

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every parameter array, in the fixed order used by checkpoints and optimisers."""
        for k, (fwd, bwd) in enumerate(self.bilstm):
            for direction, p in (("fwd", fwd), ("bwd", bwd)):
                for name, arr in p.arrays().items():
                    yield f"bilstm.{k}.{direction}.{name}", arr
        for tag, p in zip(("score1", "score2"), self.attention):
            for name, arr in p.arrays().items():
                yield f"attention.{tag}.{name}", arr
        for name, arr in self.head.arrays().items():
            yield f"head.{name}", arr

    def parameter_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.named_parameters())

    def copy(self) -> "ForecastNet":
        clone = ForecastNet(
            self.hparams,
            [
                tuple(L.LstmParams(*(a.copy() for a in p.arrays().values())) for p in pair)
                for pair in self.bilstm
            ],
            tuple(L.DenseParams(p.weights.copy(), p.bias.copy()) for p in self.attention),
            L.DenseParams(self.head.weights.copy(), self.head.bias.copy()),
            self.scalers,
            self.seed,
            self.rng_algorithm,
            dict(self.metadata),
        )
        return clone

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        """Copy ``values`` into the existing parameter arrays in place."""
        for name, arr in self.named_parameters():
            arr[...] = values[name]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for _, arr in self.named_parameters():
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def build_model(h: HParams, seed: int = 0, scalers=None) -> ForecastNet:
    """Deterministically initialise a network for ``h`` from ``seed``.

    Kernels use Glorot-uniform draws in :meth:`ForecastNet.named_parameters`
    order; biases are zero except the LSTM forget gates (+1).
    """
    if not isinstance(h, HParams):
        raise ConfigurationError(f"expected HParams, got {type(h).__name__}")
    rng = make_rng(seed)
    H = h.units_per_direction
    stack = []
    width = N_FEATURES
    for _ in range(h.n_bilstm_layers):
        stack.append((L.init_lstm(rng, width, H), L.init_lstm(rng, width, H)))
        width = 2 * H
    attention = (L.init_dense(rng, width, L.ATTENTION_HIDDEN), L.init_dense(rng, L.ATTENTION_HIDDEN, 1))
    head = L.init_dense(rng, width, N_TARGETS)
    return ForecastNet(h, stack, attention, head, tuple(scalers) if scalers else None, seed)


@dataclass
class ForwardResult:
    predictions: np.ndarray  # [B, T, 3]
    attention_weights: np.ndarray  # [B, T]
    cache: tuple | None = None


def forward(net: ForecastNet, batch, training: bool = False,
            rng: np.random.Generator | None = None) -> ForwardResult:
    x = np.asarray(batch, dtype=np.float64)
    h = net.hparams
    if x.ndim != 3 or x.shape[1] != h.timesteps or x.shape[2] != N_FEATURES:
        raise ShapeError(
            f"forward expects [B, {h.timesteps}, {N_FEATURES}] input, got {x.shape}"
        )
    layer_caches = []
    out = x
    for fwd, bwd in net.bilstm:
        out, lc = L.bilstm_forward(out, fwd, bwd)
        out, mask = L.dropout_apply(out, h.dropout_rate, rng, training)
        layer_caches.append((lc, mask))
    weighted, weights, att_cache = L.attention_apply(out, *net.attention)
    preds, head_cache = L.time_distributed_dense(weighted, net.head)
    return ForwardResult(preds, weights, (layer_caches, att_cache, head_cache))


def backward(net: ForecastNet, result: ForwardResult, dpred) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of a scalar loss given ``dpred = dLoss/dpredictions``.

    Returns ``(parameter grads keyed by name, input gradient [B, T, 7])``.
    """
    if result.cache is None:
        raise ConfigurationError("forward result carries no cache")
    layer_caches, att_cache, head_cache = result.cache
    grads: dict[str, np.ndarray] = {}
    g = L.time_distributed_dense_backward(dpred, head_cache, net.head)
    grads["head.weights"] = g.params["weights"]
    grads["head.bias"] = g.params["bias"]
    g1, g2, up = L.attention_backward(g.input_grad, att_cache, *net.attention)
    for tag, lg in (("score1", g1), ("score2", g2)):
        for name, arr in lg.params.items():
            grads[f"attention.{tag}.{name}"] = arr
    rate = net.hparams.dropout_rate
    for k in range(len(net.bilstm) - 1, -1, -1):
        lc, mask = layer_caches[k]
        up = L.dropout_backward(up, mask, rate).input_grad
        fwd, bwd = net.bilstm[k]
        gf, gb, up = L.bilstm_backward(up, lc, fwd, bwd)
        for direction, lg in (("fwd", gf), ("bwd", gb)):
            for name, arr in lg.params.items():
                grads[f"bilstm.{k}.{direction}.{name}"] = arr
    ordered = {name: grads[name] for name, _ in net.named_parameters()}
    return ordered, up


def _future_slice(result: ForwardResult, targets) -> tuple[np.ndarray, np.ndarray]:
    preds = result.predictions
    y = np.asarray(targets, dtype=np.float64)
    nf = y.shape[1] if y.ndim == 3 else -1
    if y.ndim != 3 or y.shape[0] != preds.shape[0] or y.shape[2] != preds.shape[2] or nf > preds.shape[1]:
        raise ShapeError(f"targets {y.shape} incompatible with predictions {preds.shape}")
    return preds[:, -nf:], y


def loss_mae(result: ForwardResult, targets) -> float:
    """Mean absolute error over the final ``n_future`` steps, batch and features."""
    p, y = _future_slice(result, targets)
    return float(np.mean(np.abs(p - y)))


def loss_mae_grad(result: ForwardResult, targets) -> np.ndarray:
    """d(loss_mae)/d(predictions), using sign(0) = 0."""
    p, y = _future_slice(result, targets)
    dpred = np.zeros_like(result.predictions)
    dpred[:, -y.shape[1]:] = np.sign(p - y) / y.size
    return dpred


def loss_and_grads(net: ForecastNet, x, y, training: bool = False, rng=None):
    result = forward(net, x, training=training, rng=rng)
    loss = loss_mae(result, y)
    grads, _ = backward(net, result, loss_mae_grad(result, y))
    return loss, grads


def predict_future(net: ForecastNet, x, chunk: int = 512) -> np.ndarray:
    """Inference-mode predictions for the ``n_future`` forecast steps, ``[B, n_future, 3]``."""
    x = np.asarray(x, dtype=np.float64)
    nf = net.hparams.n_future
    out = [forward(net, x[i : i + chunk]).predictions[:, -nf:] for i in range(0, len(x), chunk)]
    if not out:
        return np.zeros((0, nf, N_TARGETS))
    return np.concatenate(out, axis=0)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: ForecastNet, path) -> None:
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in net.named_parameters())
    header = {
        "format": "meteocast-checkpoint",
        "version": CHECKPOINT_VERSION,
        "hparams": asdict(net.hparams),
        "gate_order": list(L.GATE_ORDER),
        "scalers": [asdict(s) for s in net.scalers] if net.scalers else None,
        "seed": net.seed,
        "rng_algorithm": net.rng_algorithm,
        "manifest": [[name, list(a.shape)] for name, a in net.named_parameters()],
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "metadata": net.metadata,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(blob)
    tmp.replace(path)


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic bytes, not a checkpoint")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated preamble")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: field 'version' is {version}, expected {CHECKPOINT_VERSION}")
    if len(raw) < 20 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from None
    return header, raw[20 + hlen :]


def load_checkpoint(path) -> ForecastNet:
    header, blob = read_checkpoint_header(path)
    for key in ("hparams", "manifest", "blob_sha256", "seed"):
        if key not in header:
            raise FormatError(f"{path}: missing header field {key!r}")
    if header.get("gate_order") != list(L.GATE_ORDER):
        raise FormatError(f"{path}: field 'gate_order' is {header.get('gate_order')}")
    expected = sum(int(np.prod(shape)) for _, shape in header["manifest"]) * 8
    if len(blob) != expected:
        raise FormatError(f"{path}: parameter blob has {len(blob)} bytes, manifest needs {expected}")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise FormatError(f"{path}: field 'blob_sha256' does not match the parameter blob")
    try:
        hparams = HParams(**header["hparams"])
    except (TypeError, ConfigurationError) as exc:
        raise FormatError(f"{path}: field 'hparams' invalid ({exc})") from None
    scalers = header.get("scalers")
    net = build_model(hparams, 0, [Scaler(**s) for s in scalers] if scalers else None)
    names = [n for n, _ in net.named_parameters()]
    if names != [n for n, _ in header["manifest"]]:
        raise FormatError(f"{path}: field 'manifest' does not match the network layout")
    values = {}
    offset = 0
    for (name, shape), (_, arr) in zip(header["manifest"], net.named_parameters()):
        if tuple(shape) != arr.shape:
            raise FormatError(f"{path}: manifest shape for {name} is {shape}, expected {arr.shape}")
        n = arr.size * 8
        values[name] = np.frombuffer(blob[offset : offset + n], dtype="<f8").reshape(arr.shape)
        offset += n
    net.load_parameters(values)
    net.seed = header["seed"]
    net.rng_algorithm = header.get("rng_algorithm", RNG_ALGORITHM)
    net.metadata = header.get("metadata", {})
    return net
