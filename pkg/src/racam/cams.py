"""Class activation maps: gradient-weighted, perturbation-based and region-aware.

Every per-layer map is rectified, bilinearly resized to the input resolution
and min-max normalised. Maps from several layers are fused by an elementwise
maximum (or mean) and renormalised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fgbp import STANDARD, FgbpConfig, PropagationMode, fgbp_pass
from .postprocess import normalize_minmax
from .tensor import Tape, backward, bilinear_resize

EPS = 1e-8

GRAD_CAM = "grad-cam"
GRAD_CAM_PP = "grad-cam++"
XGRAD_CAM = "xgrad-cam"
ABLATION_CAM = "ablation-cam"
SCORE_CAM = "score-cam"
LAYER_CAM = "layer-cam"
FULLGRAD = "full-grad"
RA_CAM = "ra-cam"
LAYER_CAM_FGBP = "layer-cam+fgbp"
FULLGRAD_FGBP = "full-grad+fgbp"

METHODS = (GRAD_CAM, GRAD_CAM_PP, XGRAD_CAM, ABLATION_CAM, SCORE_CAM,
           LAYER_CAM, FULLGRAD, RA_CAM, LAYER_CAM_FGBP, FULLGRAD_FGBP)

# methods that fuse every stage by default; the rest look at the last stage
_MULTI_LAYER = (LAYER_CAM, RA_CAM, LAYER_CAM_FGBP)


@dataclass
class CamRequest:
    model: object
    image: np.ndarray  # [C,H,W]
    class_index: int = 1
    layers: tuple[str, ...] | None = None
    method: str = RA_CAM
    fgbp: FgbpConfig = field(default_factory=FgbpConfig)
    fusion: str = "max"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown CAM method {self.method!r}; valid: {', '.join(METHODS)}")
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.layers is None:
            self.layers = default_layers(self.model, self.method)
        self.layers = tuple(self.layers)
        if not self.layers:
            raise ValueError("CamRequest: empty layer list")
        acts = self.model.spec.activation_names()
        bad = [l for l in self.layers if l not in acts]
        if bad:
            raise ValueError(f"CamRequest: {bad} are not activation layers; choose from {acts}")


@dataclass
class Heatmap:
    values: np.ndarray  # [1,H,W] in [0,1]
    class_index: int
    method: str
    layers: tuple[str, ...] = ()

    @property
    def is_blank(self) -> bool:
        return not self.values.any()


def default_layers(model, method: str) -> tuple[str, ...]:
    ends = tuple(model.spec.stage_ends)
    return ends if method in _MULTI_LAYER else ends[-1:]


def finish_map(m: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """ReLU, resize ``[h,w]`` to ``size`` and min-max normalise to ``[1,H,W]``."""
    m = np.maximum(np.asarray(m, dtype=np.float32), 0)
    up = bilinear_resize(m[None], *size).data
    return normalize_minmax(up)


def fuse_layers(maps: list[np.ndarray], how: str = "max") -> np.ndarray:
    if not maps:
        raise ValueError("fuse_layers: no maps to fuse")
    if len(maps) == 1:
        return maps[0]
    stack = np.stack(maps)
    if how == "max":
        fused = stack.max(axis=0)
    elif how == "mean":
        fused = stack.astype(np.float64).mean(axis=0)
    else:
        raise ValueError(f"unknown fusion rule {how!r}")
    return normalize_minmax(fused)


def gradients(model, image, class_index: int, mode: PropagationMode, names) -> tuple[dict, dict]:
    """Activations and ``mode`` gradients of the class score at ``names``."""
    out = model.forward(np.asarray(image, dtype=np.float32)[None], track_input=True)
    tape = Tape.record(out)
    names = list(names)
    grads = backward(tape, class_index, mode, layers=names)
    return {n: tape[n][0] for n in names}, {n: grads[n][0] for n in names}


def _weighted(req: CamRequest, weight_fn, mode=PropagationMode(STANDARD)) -> Heatmap:
    size = req.image.shape[-2:]
    acts, grads = gradients(req.model, req.image, req.class_index, mode, req.layers)
    maps = []
    for name in req.layers:
        A = acts[name].astype(np.float64)
        g = grads[name].astype(np.float64)
        maps.append(finish_map(weight_fn(A, g), size))
    return Heatmap(fuse_layers(maps, req.fusion), req.class_index, req.method, req.layers)


def _channel_sum(weights: np.ndarray, A: np.ndarray) -> np.ndarray:
    return np.tensordot(weights, A, axes=(0, 0))


def grad_cam(req: CamRequest) -> Heatmap:
    return _weighted(req, lambda A, g: _channel_sum(g.mean(axis=(1, 2)), A))


def grad_cam_pp_weights(A: np.ndarray, g: np.ndarray) -> np.ndarray:
    g2, g3 = g ** 2, g ** 3
    denom = 2.0 * g2 + A.sum(axis=(1, 2))[:, None, None] * g3
    safe = np.where(denom != 0, denom, 1.0)
    a = np.where(denom != 0, g2 / safe, 0.0)
    return (a * np.maximum(g, 0)).sum(axis=(1, 2))


def grad_cam_pp(req: CamRequest) -> Heatmap:
    return _weighted(req, lambda A, g: _channel_sum(grad_cam_pp_weights(A, g), A))


def xgrad_cam(req: CamRequest) -> Heatmap:
    return _weighted(req, lambda A, g: _channel_sum((g * A).sum(axis=(1, 2)) / (A.sum(axis=(1, 2)) + EPS), A))


def layer_cam(req: CamRequest, mode: PropagationMode = PropagationMode(STANDARD)) -> Heatmap:
    return _weighted(req, lambda A, g: (np.maximum(g, 0) * A).sum(axis=0), mode)


def _activations(model, image, names) -> dict[str, np.ndarray]:
    tape = Tape.record(model.forward(np.asarray(image, dtype=np.float32)[None], track_input=True))
    return {n: tape[n][0] for n in names}


def ablation_weights(model, image, class_index: int, name: str) -> tuple[np.ndarray, np.ndarray]:
    """Relative score drop when each channel of ``name`` is zeroed; returns ``(weights, A)``."""
    # tracking the input records the named intermediates; no backward pass runs
    tape = Tape.record(model.forward(np.asarray(image, dtype=np.float32)[None], track_input=True))
    A = tape[name]
    y = float(tape.output.data[0, class_index])
    weights = np.zeros(A.shape[1])
    for k in range(A.shape[1]):
        ablated = A.copy()
        ablated[:, k] = 0
        yk = float(model.forward(ablated, start=name).data[0, class_index])
        weights[k] = (y - yk) / (abs(y) + EPS)
    return weights, A[0].astype(np.float64)


def ablation_cam(req: CamRequest) -> Heatmap:
    size = req.image.shape[-2:]
    maps = [finish_map(_channel_sum(*ablation_weights(req.model, req.image, req.class_index, n)), size)
            for n in req.layers]
    return Heatmap(fuse_layers(maps, req.fusion), req.class_index, req.method, req.layers)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def score_weights(model, image, c: int, name: str, chunk: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Softmax gain over the zero baseline for each activation-masked input; returns ``(weights, A)``."""
    image = np.asarray(image, dtype=np.float32)
    H, W = image.shape[-2:]
    A = _activations(model, image, [name])[name]
    base = _softmax(model.predict(np.zeros_like(image)[None]))[0, c]
    masks = np.stack([normalize_minmax(A[k]) for k in range(A.shape[0])])
    up = bilinear_resize(masks, H, W).data  # [K,H,W]
    weights = np.zeros(A.shape[0])
    for s in range(0, A.shape[0], chunk):
        batch = image[None] * up[s : s + chunk, None]
        weights[s : s + chunk] = _softmax(model.predict(batch))[:, c] - base
    return weights, A.astype(np.float64)


def score_cam(req: CamRequest) -> Heatmap:
    size = req.image.shape[-2:]
    maps = [finish_map(_channel_sum(*score_weights(req.model, req.image, req.class_index, n)), size)
            for n in req.layers]
    return Heatmap(fuse_layers(maps, req.fusion), req.class_index, req.method, req.layers)


def _psi(t: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """abs, min-max over the whole ``[C,h,w]`` tensor, resize, sum over channels."""
    t = normalize_minmax(np.abs(t))
    return bilinear_resize(t, *size).data.astype(np.float64).sum(axis=0)


def full_grad(req: CamRequest, mode: PropagationMode = PropagationMode(STANDARD)) -> Heatmap:
    model = req.model
    size = req.image.shape[-2:]
    convs = model.spec.conv_names()
    out = model.forward(req.image[None], track_input=True)
    tape = Tape.record(out)
    grads = backward(tape, req.class_index, mode, layers=["input", *convs])
    total = _psi(req.image.astype(np.float64) * grads["input"][0], size)
    for name in convs:
        bias = model.params[f"{name}.bias"].astype(np.float64)
        total = total + _psi(bias[:, None, None] * grads[name][0], size)
    values = normalize_minmax(np.maximum(total, 0))[None]
    return Heatmap(values, req.class_index, req.method, tuple(["input", *convs]))


def ra_cam(req: CamRequest) -> Heatmap:
    """Filtered gradients times activations, summed over channels and rectified."""
    size = req.image.shape[-2:]
    acts, filt = fgbp_pass(req.model, req.image, req.class_index, req.layers, req.fgbp)
    maps = [finish_map((filt[n].astype(np.float64) * acts[n]).sum(axis=0), size) for n in req.layers]
    return Heatmap(fuse_layers(maps, req.fusion), req.class_index, req.method, req.layers)


def ra_cam_layer_maps(req: CamRequest) -> dict[str, np.ndarray]:
    """Per-layer RA-CAM maps before fusion."""
    size = req.image.shape[-2:]
    acts, filt = fgbp_pass(req.model, req.image, req.class_index, req.layers, req.fgbp)
    return {n: finish_map((filt[n].astype(np.float64) * acts[n]).sum(axis=0), size) for n in req.layers}


def with_fgbp_plugin(base: str, req: CamRequest) -> Heatmap:
    """Run LayerCAM or FullGrad with every gradient propagated under FGBP."""
    if base == LAYER_CAM:
        hm = layer_cam(req, req.fgbp.mode)
        hm.method = LAYER_CAM_FGBP
    elif base == FULLGRAD:
        hm = full_grad(req, req.fgbp.mode)
        hm.method = FULLGRAD_FGBP
    else:
        raise ValueError(f"FGBP plug-in supports {LAYER_CAM} and {FULLGRAD}, not {base!r}")
    return hm


_DISPATCH = {
    GRAD_CAM: grad_cam,
    GRAD_CAM_PP: grad_cam_pp,
    XGRAD_CAM: xgrad_cam,
    ABLATION_CAM: ablation_cam,
    SCORE_CAM: score_cam,
    LAYER_CAM: layer_cam,
    FULLGRAD: full_grad,
    RA_CAM: ra_cam,
    LAYER_CAM_FGBP: lambda r: with_fgbp_plugin(LAYER_CAM, r),
    FULLGRAD_FGBP: lambda r: with_fgbp_plugin(FULLGRAD, r),
}


def compute_cam(req: CamRequest) -> Heatmap:
    return _DISPATCH[req.method](req)

