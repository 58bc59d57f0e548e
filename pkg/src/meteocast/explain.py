"""Integrated Gradients over model inputs and attention-weight profiles.

The attributed scalar for an output variable is the mean of its scaled
prediction over the selected output timesteps (all ``n_future`` forecast
steps by default). The default baseline is all zeros in scaled space.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import FEATURE_NAMES, TARGET_NAMES, WindowSet
from .exceptions import ConfigurationError, NumericError
from .model import ForecastNet, backward, forward

DEFAULT_STEPS = 64


@dataclass
class Attribution:
    values: np.ndarray  # [T, 7]
    target: str
    timesteps: tuple[int, ...]
    baseline: str
    f_input: float
    f_baseline: float
    steps: int

    @property
    def delta(self) -> float:
        return self.f_input - self.f_baseline

    @property
    def completeness_residual(self) -> float:
        return abs(float(self.values.sum()) - self.delta)


def midpoint_alphas(steps: int) -> np.ndarray:
    return (np.arange(1, steps + 1) - 0.5) / steps


def integrated_gradients_fn(grad_fn, x, baseline, steps: int = DEFAULT_STEPS,
                            chunk: int = 256) -> np.ndarray:
    """Midpoint-rule Integrated Gradients for an arbitrary differentiable ``F``.

    ``grad_fn`` maps a batch of points ``[m, *x.shape]`` to their gradients
    of the same shape.
    """
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if x.shape != b.shape:
        raise ConfigurationError(f"input {x.shape} and baseline {b.shape} differ in shape")
    if steps < 1:
        raise ConfigurationError(f"steps must be >= 1, got {steps}")
    diff = x - b
    alphas = midpoint_alphas(steps)
    total = np.zeros_like(x)
    for s in range(0, steps, chunk):
        a = alphas[s : s + chunk]
        pts = b[None] + a.reshape((-1,) + (1,) * x.ndim) * diff[None]
        g = np.asarray(grad_fn(pts))
        bad = ~np.isfinite(g.reshape(len(a), -1)).all(axis=1)
        if bad.any():
            raise NumericError(f"non-finite gradient at path step k={s + int(np.argmax(bad)) + 1}")
        total += g.sum(axis=0)
    return diff * total / steps


def _target_index(target) -> int:
    if isinstance(target, str):
        try:
            return TARGET_NAMES.index(target)
        except ValueError:
            raise ConfigurationError(f"unknown target {target!r}; expected one of {TARGET_NAMES}") from None
    if not 0 <= int(target) < len(TARGET_NAMES):
        raise ConfigurationError(f"target index {target} out of range")
    return int(target)


def _output_steps(net: ForecastNet, timesteps) -> np.ndarray:
    h = net.hparams
    if timesteps is None:
        return np.arange(h.n_past, h.timesteps)
    steps = np.asarray(sorted(set(int(t) for t in timesteps)))
    if steps.size == 0 or steps.min() < 0 or steps.max() >= h.timesteps:
        raise ConfigurationError(f"output timesteps must lie in [0, {h.timesteps})")
    return steps


def target_value(net: ForecastNet, x, target, timesteps=None) -> np.ndarray:
    """``F`` for a batch ``[B, T, 7]``: mean prediction of ``target`` over ``timesteps``."""
    k = _target_index(target)
    steps = _output_steps(net, timesteps)
    return forward(net, np.asarray(x)).predictions[:, steps, k].mean(axis=1)


def integrated_gradients(net: ForecastNet, x, baseline=None, targets=TARGET_NAMES,
                         timesteps=None, steps: int = DEFAULT_STEPS, chunk: int = 128):
    """Attributions of one input window ``[T, 7]`` for each requested target.

    One forward pass per path chunk is shared by all targets. Returns a
    list of :class:`Attribution`, one per target, in the order given.
    """
    if steps < 8:
        raise ConfigurationError(f"steps must be >= 8, got {steps}")
    x = np.asarray(x, dtype=np.float64)
    base_id = "zeros" if baseline is None else "custom"
    b = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if x.shape != b.shape or x.shape != (net.hparams.timesteps, len(FEATURE_NAMES)):
        raise ConfigurationError(f"input {x.shape} / baseline {b.shape} do not fit the network")
    if isinstance(targets, (str, int)):
        targets = (targets,)
    idx = [_target_index(t) for t in targets]
    out_steps = _output_steps(net, timesteps)
    diff = x - b
    alphas = midpoint_alphas(steps)
    totals = np.zeros((len(idx),) + x.shape)
    for s in range(0, steps, chunk):
        a = alphas[s : s + chunk]
        pts = b[None] + a[:, None, None] * diff[None]
        res = forward(net, pts)
        for j, k in enumerate(idx):
            dpred = np.zeros_like(res.predictions)
            dpred[:, out_steps, k] = 1.0 / len(out_steps)
            _, g = backward(net, res, dpred)
            bad = ~np.isfinite(g.reshape(len(a), -1)).all(axis=1)
            if bad.any():
                raise NumericError(f"non-finite gradient at path step k={s + int(np.argmax(bad)) + 1}")
            totals[j] += g.sum(axis=0)
    ends = forward(net, np.stack([x, b])).predictions[:, out_steps]
    result = []
    for j, k in enumerate(idx):
        result.append(Attribution(
            diff * totals[j] / steps, TARGET_NAMES[k], tuple(int(t) for t in out_steps), base_id,
            float(ends[0, :, k].mean()), float(ends[1, :, k].mean()), steps,
        ))
    return result


@dataclass
class AttributionSummary:
    """Aggregates per target plus the all-target overall importance."""

    curves: dict[str, np.ndarray]  # target -> [T, 7] mean |IG|
    signed_curves: dict[str, np.ndarray]  # target -> [T, 7] mean IG
    importance: dict[str, np.ndarray]  # target -> [7] mean |IG| over samples and timesteps
    overall: np.ndarray  # [7], importance averaged over targets
    n_samples: dict[str, int] = field(default_factory=dict)

    def ranking(self) -> list[str]:
        return [FEATURE_NAMES[i] for i in np.argsort(-self.overall, kind="stable")]


def aggregate_attributions(attributions) -> AttributionSummary:
    attributions = list(attributions)
    if not attributions:
        raise ConfigurationError("no attributions to aggregate")
    by_target: dict[str, list[np.ndarray]] = {}
    conventions = {(a.timesteps, a.baseline, a.steps) for a in attributions}
    if len(conventions) > 1:
        raise ConfigurationError("attributions use different target/baseline conventions")
    for a in attributions:
        by_target.setdefault(a.target, []).append(a.values)
    curves, signed, importance, counts = {}, {}, {}, {}
    for name in TARGET_NAMES:
        if name not in by_target:
            continue
        stack = np.stack(by_target[name])  # [N, T, 7]
        curves[name] = np.abs(stack).mean(axis=0)
        signed[name] = stack.mean(axis=0)
        importance[name] = curves[name].mean(axis=0)
        counts[name] = len(stack)
    overall = np.mean([importance[n] for n in importance], axis=0)
    return AttributionSummary(curves, signed, importance, overall, counts)


@dataclass
class AttentionProfile:
    mean: np.ndarray  # [T]
    std: np.ndarray  # [T]
    count: int
    offsets: np.ndarray  # [T] hours relative to the present; <= 0 is the past


def extract_attention_profile(net: ForecastNet, windows: WindowSet, chunk: int = 512) -> AttentionProfile:
    if len(windows) == 0:
        raise ConfigurationError("cannot profile attention on an empty window set")
    weights = np.concatenate([
        forward(net, windows.inputs[i : i + chunk]).attention_weights
        for i in range(0, len(windows), chunk)
    ])
    h = net.hparams
    offsets = np.arange(h.timesteps) - h.n_past + 1
    return AttentionProfile(weights.mean(axis=0), weights.std(axis=0), len(weights), offsets)
