"""Activation backward rules: standard, guided and filtering-guided.

The filtering-guided rule keeps a gradient only where the forward activation
was open, the incoming gradient is positive, and it reaches the ``delta``-th
percentile of the positive gradients in its channel (or whole layer).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

STANDARD = "standard"
GUIDED = "guided"
FGBP = "fgbp"
PER_CHANNEL = "per-channel"
PER_LAYER = "per-layer"


def _check_delta(delta: float) -> None:
    if not 0.0 <= delta <= 100.0 or math.isnan(delta):
        raise ValueError(f"delta must lie in [0, 100], got {delta}")


@dataclass(frozen=True)
class PropagationMode:
    kind: str = STANDARD
    delta: float = 50.0
    scope: str = PER_CHANNEL

    def __post_init__(self):
        if self.kind not in (STANDARD, GUIDED, FGBP):
            raise ValueError(f"unknown propagation mode {self.kind!r}")
        if self.scope not in (PER_CHANNEL, PER_LAYER):
            raise ValueError(f"unknown threshold scope {self.scope!r}")
        _check_delta(self.delta)


@dataclass(frozen=True)
class FgbpConfig:
    delta: float = 50.0
    scope: str = PER_CHANNEL

    def __post_init__(self):
        _check_delta(self.delta)
        if self.scope not in (PER_CHANNEL, PER_LAYER):
            raise ValueError(f"unknown threshold scope {self.scope!r}")

    @property
    def mode(self) -> PropagationMode:
        return PropagationMode(FGBP, self.delta, self.scope)


def percentile_positive(values, delta: float) -> float:
    """Nearest-rank ``delta``-th percentile of the strictly positive entries.

    Returns ``inf`` when there are no positive entries and ``0`` for
    ``delta == 0``.
    """
    _check_delta(delta)
    v = np.asarray(values).ravel()
    pos = np.sort(v[v > 0])
    if pos.size == 0:
        return math.inf
    if delta == 0:
        return 0.0
    rank = min(max(math.ceil(delta * pos.size / 100.0), 1), pos.size)
    return float(pos[rank - 1])


def _group_view(g: np.ndarray, scope: str) -> np.ndarray:
    """Reshape to ``(groups, elements)`` rows over which one threshold applies."""
    if scope == PER_CHANNEL and g.ndim >= 3:
        return g.reshape(-1, g.shape[-2] * g.shape[-1])
    if g.ndim == 4:
        return g.reshape(g.shape[0], -1)
    return g.reshape(1, -1)


def group_thresholds(g: np.ndarray, delta: float, scope: str = PER_CHANNEL) -> np.ndarray:
    """Vectorised :func:`percentile_positive`, broadcast back to ``g.shape``."""
    _check_delta(delta)
    rows = _group_view(g, scope)
    npos = (rows > 0).sum(axis=1)
    if delta == 0:
        thr = np.where(npos > 0, 0.0, np.inf)
    else:
        ranked = np.sort(np.where(rows > 0, rows, np.inf), axis=1)
        rank = np.clip(np.ceil(delta * npos / 100.0).astype(np.int64), 1, np.maximum(npos, 1))
        thr = ranked[np.arange(rows.shape[0]), rank - 1].astype(np.float64)
        thr[npos == 0] = np.inf
    per_elem = np.repeat(thr, rows.shape[1])
    return per_elem.reshape(g.shape)


def filter_gradient(g: np.ndarray, delta: float, scope: str = PER_CHANNEL) -> np.ndarray:
    """Keep entries of ``g`` that are positive and at or above their group threshold."""
    thr = group_thresholds(g, delta, scope)
    keep = (g > 0) & (g >= thr)
    return np.where(keep, g, np.zeros_like(g))


def activation_backward(grad_in, saved_act_input, mode: PropagationMode, slope: float = 0.0) -> np.ndarray:
    grad_in = np.asarray(grad_in)
    x = np.asarray(saved_act_input)
    if grad_in.shape != x.shape:
        raise ValueError(f"activation_backward: gradient {grad_in.shape} and input {x.shape} differ in shape")
    zero = np.zeros_like(grad_in)
    open_gate = x > 0
    if mode.kind == STANDARD:
        return np.where(open_gate, grad_in, grad_in.dtype.type(slope) * grad_in)
    keep = open_gate & (grad_in > 0)
    if mode.kind == FGBP:
        keep &= grad_in >= group_thresholds(grad_in, mode.delta, mode.scope)
    return np.where(keep, grad_in, zero)


def fgbp_pass(model, image, class_index: int, layers, cfg: FgbpConfig):
    """One forward and one FGBP reverse pass.

    Returns ``(activations, filtered)`` dicts keyed by layer name. The chain of
    filtered activation backwards from the logit down to a shallow layer
    contains the chain for every deeper layer, so one reverse pass serves all
    targets. The percentile filter is then applied once more at each target
    layer itself.
    """
    from .tensor import Tape, backward

    layers = list(layers)
    acts = set(model.spec.activation_names())
    bad = [name for name in layers if name not in acts]
    if bad:
        raise KeyError(f"not activation layers: {bad}")
    out = model.forward(np.asarray(image)[None], track_input=True)
    tape = Tape.record(out)
    grads = backward(tape, class_index, cfg.mode, layers=layers)
    activations = {name: tape[name][0] for name in layers}
    filtered = {name: filter_gradient(grads[name][0], cfg.delta, cfg.scope) for name in layers}
    return activations, filtered


def filtered_gradients(model, image, class_index: int, layers, cfg: FgbpConfig) -> dict[str, np.ndarray]:
    return fgbp_pass(model, image, class_index, layers, cfg)[1]


def filtered_gradient(model, image, class_index: int, target_layer: str, cfg: FgbpConfig) -> np.ndarray:
    """Filtered gradient field ``[C,h,w]`` of the class score at one activation layer."""
    return filtered_gradients(model, image, class_index, [target_layer], cfg)[target_layer]
