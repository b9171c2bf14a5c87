"""Stage-structured CNNs, their SGD training loops and weight files."""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import (
    DTYPE,
    Tape,
    Tensor,
    backward,
    bilinear_resize,
    conv2d,
    global_avg_pool,
    leaky_relu,
    linear,
    maxpool2d,
    softmax_cross_entropy,
    standardize,
)

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator whose seed is a splitmix64 hash of ``(seed, stream)``."""
    return np.random.Generator(np.random.PCG64(splitmix64((seed & MASK64) ^ splitmix64(stream))))


# --------------------------------------------------------------------------
# architecture description
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Layer:
    kind: str  # standardize | conv | lrelu | maxpool | gap | linear | upsample
    name: str
    cin: int = 0
    cout: int = 0
    k: int = 0
    stride: int = 1
    pad: int = 0
    slope: float = 0.0


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    layers: tuple[Layer, ...]
    stage_ends: tuple[str, ...]
    options: dict = field(default_factory=dict, hash=False, compare=True)

    def activation_names(self) -> list[str]:
        return [l.name for l in self.layers if l.kind == "lrelu"]

    def conv_names(self) -> list[str]:
        return [l.name for l in self.layers if l.kind == "conv"]

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(f"no layer named {name!r}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for l in self.layers:
            if l.kind == "conv":
                shapes[f"{l.name}.weight"] = (l.cout, l.cin, l.k, l.k)
                shapes[f"{l.name}.bias"] = (l.cout,)
            elif l.kind == "linear":
                shapes[f"{l.name}.weight"] = (l.cout, l.cin)
                shapes[f"{l.name}.bias"] = (l.cout,)
        return shapes


def _conv_block(prefix: str, cin: int, cout: int, slope: float) -> list[Layer]:
    return [
        Layer("conv", f"{prefix}.conv1", cin, cout, 3, 1, 1),
        Layer("lrelu", f"{prefix}.act1", slope=slope),
        Layer("conv", f"{prefix}.conv2", cout, cout, 3, 1, 1),
        Layer("lrelu", f"{prefix}.act2", slope=slope),
    ]


def tiny_vgg_spec(channels: Sequence[int] = (8, 16, 32), slope: float = 0.01,
                  final_pool: bool = True, in_channels: int = 1, classes: int = 2) -> ModelSpec:
    layers: list[Layer] = [Layer("standardize", "norm")]
    cin = in_channels
    ends = []
    for s, cout in enumerate(channels, start=1):
        layers += _conv_block(f"s{s}", cin, cout, slope)
        ends.append(f"s{s}.act2")
        if final_pool or s < len(channels):
            layers.append(Layer("maxpool", f"s{s}.pool", k=2, stride=2))
        cin = cout
    layers += [Layer("gap", "gap"), Layer("linear", "fc", cin, classes)]
    opts = {"channels": list(channels), "slope": slope, "final_pool": final_pool,
            "in_channels": in_channels, "classes": classes}
    return ModelSpec("tiny_vgg", tuple(layers), tuple(ends), opts)


def mini_segnet_spec(channels: Sequence[int] = (8, 16), slope: float = 0.01,
                     in_channels: int = 1, classes: int = 2) -> ModelSpec:
    layers: list[Layer] = [Layer("standardize", "norm")]
    cin = in_channels
    ends = []
    for s, cout in enumerate(channels, start=1):
        layers += _conv_block(f"s{s}", cin, cout, slope)
        layers.append(Layer("maxpool", f"s{s}.pool", k=2, stride=2))
        ends.append(f"s{s}.act2")
        cin = cout
    for d, cout in enumerate(reversed(channels), start=1):
        layers += [
            Layer("upsample", f"d{d}.up", k=2),
            Layer("conv", f"d{d}.conv", cin, cout, 3, 1, 1),
            Layer("lrelu", f"d{d}.act", slope=slope),
        ]
        ends.append(f"d{d}.act")
        cin = cout
    layers.append(Layer("conv", "head", cin, classes, 1, 1, 0))
    opts = {"channels": list(channels), "slope": slope, "in_channels": in_channels, "classes": classes}
    return ModelSpec("mini_segnet", tuple(layers), tuple(ends), opts)


_BUILDERS = {"tiny_vgg": tiny_vgg_spec, "mini_segnet": mini_segnet_spec}


def spec_from_options(arch: str, options: dict) -> ModelSpec:
    if arch not in _BUILDERS:
        raise ValueError(f"unknown architecture {arch!r}")
    return _BUILDERS[arch](**options)


# --------------------------------------------------------------------------
# model state and forward pass
# --------------------------------------------------------------------------


class ModelState:
    """Parameters bound to a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray]):
        shapes = spec.param_shapes()
        if set(shapes) != set(params):
            raise ValueError(f"parameter names {sorted(params)} do not match spec {sorted(shapes)}")
        for k, shp in shapes.items():
            if tuple(params[k].shape) != shp:
                raise ValueError(f"parameter {k} has shape {params[k].shape}, expected {shp}")
        self.spec = spec
        self.params = {k: np.ascontiguousarray(params[k], dtype=DTYPE) for k in shapes}

    def copy(self) -> "ModelState":
        return ModelState(self.spec, {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def forward(self, x, *, grad_params: bool = False, track_input: bool = False,
                start: str | None = None, replace: dict[str, np.ndarray] | None = None) -> Tensor:
        """Run the network on ``[C,H,W]`` or ``[N,C,H,W]`` input.

        ``start`` names a layer whose *output* ``x`` is; evaluation resumes at
        the following layer. ``replace`` substitutes the output of named
        layers. The input tensor is recorded as ``"input"``.
        """
        replace = replace or {}
        layers = self.spec.layers
        first = 0 if start is None else self.spec.index(start) + 1
        h = Tensor(x, requires_grad=track_input, name="input" if start is None else start)
        p = {k: Tensor(v, requires_grad=grad_params, name=k) for k, v in self.params.items()}
        for layer in layers[first:]:
            n = layer.name
            if layer.kind == "standardize":
                h = standardize(h, name=n)
            elif layer.kind == "conv":
                h = conv2d(h, p[f"{n}.weight"], p[f"{n}.bias"], layer.stride, layer.pad, name=n)
            elif layer.kind == "lrelu":
                h = leaky_relu(h, layer.slope, name=n)
            elif layer.kind == "maxpool":
                h = maxpool2d(h, layer.k, layer.stride, name=n)
            elif layer.kind == "gap":
                h = global_avg_pool(h, name=n)
            elif layer.kind == "linear":
                h = linear(h, p[f"{n}.weight"], p[f"{n}.bias"], name=n)
            elif layer.kind == "upsample":
                H, W = h.shape[-2:]
                h = bilinear_resize(h, H * layer.k, W * layer.k, name=n)
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            if n in replace:
                h = Tensor(replace[n], requires_grad=h.requires_grad, name=n)
        return h

    def predict(self, x) -> np.ndarray:
        return self.forward(x).data

    def activations(self, x, names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
        tape = Tape.record(self.forward(x, track_input=True))
        names = names if names is not None else self.spec.activation_names()
        return {n: tape[n] for n in names}


def _init(spec: ModelSpec, seed: int) -> ModelState:
    rng = make_rng(seed, stream=0x1A17)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    return ModelState(spec, params)


def tiny_vgg_init(seed: int, **options) -> ModelState:
    """Per-image standardization, three conv stages (8/16/32 channels) with leaky ReLU, GAP and a 2-way head."""
    return _init(tiny_vgg_spec(**options), seed)


def mini_segnet_init(seed: int, **options) -> ModelState:
    """Per-image standardization, two-stage encoder, upsampling decoder and a 1x1 per-pixel 2-way head."""
    return _init(mini_segnet_spec(**options), seed)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.0005
    momentum: float = 0.9
    batch: int = 4
    epochs: int = 10
    seed: int = 0
    augment: bool = True
    hflip: bool = True
    vflip: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")

    def as_dict(self) -> dict:
        return asdict(self)


class SGD:
    """Classical momentum: ``v <- m v - lr g``; ``theta <- theta + v``."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float):
        self.lr = DTYPE(lr)
        self.momentum = DTYPE(momentum)
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k in params:
            v = self.momentum * self.velocity[k] - self.lr * grads[k]
            self.velocity[k] = v
            params[k] = params[k] + v


def _augment(x: np.ndarray, y: np.ndarray | None, rng: np.random.Generator, cfg: TrainConfig):
    flips = rng.random(2)
    if not cfg.augment:
        return x, y
    axes = []
    if cfg.hflip and flips[0] < 0.5:
        axes.append(-1)
    if cfg.vflip and flips[1] < 0.5:
        axes.append(-2)
    if axes:
        x = np.flip(x, axis=axes)
        if y is not None:
            y = np.flip(y, axis=axes)
    return x, y


def _run_epochs(model: ModelState, images: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
                evaluate, higher_is_better: bool = True):
    """Shared SGD loop. ``evaluate(model)`` returns the selection score or None."""
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    state = model.copy()
    shuffle_rng = make_rng(cfg.seed, stream=1)
    flip_rng = make_rng(cfg.seed, stream=2)
    opt = SGD(state.params, cfg.lr, cfg.momentum)
    names = list(state.params)
    best, best_score = state.copy(), None
    history = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            xs, ys = [], []
            for i in idx:
                x, y = _augment(images[i], targets[i] if targets.ndim > 1 else None, flip_rng, cfg)
                xs.append(x)
                ys.append(targets[i] if y is None else y)
            xb = np.ascontiguousarray(np.stack(xs))
            yb = np.ascontiguousarray(np.stack(ys)).astype(np.int64)
            out = state.forward(xb, grad_params=True)
            loss = softmax_cross_entropy(out, yb)
            grads = backward(Tape.record(loss), layers=names)
            opt.step(state.params, grads)
            losses.append(float(loss.data[0]))
        score = evaluate(state)
        entry = {"epoch": epoch + 1, "loss": float(np.mean(losses))}
        if score is not None:
            entry["val"] = score
            better = best_score is None or (score > best_score if higher_is_better else score < best_score)
            if better:
                best, best_score = state.copy(), score
        history.append(entry)
        log.info("epoch %d loss %.5f val %s", epoch + 1, entry["loss"], score)
    if best_score is None:
        best = state
    return best, history


def classify(model: ModelState, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Argmax class per image."""
    preds = []
    for s in range(0, len(images), batch):
        preds.append(model.predict(np.asarray(images[s : s + batch])).argmax(axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model: ModelState, images: np.ndarray, labels: np.ndarray) -> float:
    return float((classify(model, images) == np.asarray(labels)).mean())


def train_classifier(model: ModelState, images, labels, cfg: TrainConfig,
                     val: tuple | None = None) -> tuple[ModelState, list[dict]]:
    """SGD with momentum on image-level labels.

    With ``val=(images, labels)`` the state with the best validation accuracy
    (earliest on ties) is returned; otherwise the final state.
    """
    images = np.asarray(images, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    evaluate = (lambda m: accuracy(m, *val)) if val is not None else (lambda m: None)
    best, history = _run_epochs(model, images, labels, cfg, evaluate)
    for h in history:
        if "val" in h:
            h["val_accuracy"] = h.pop("val")
    return best, history


def segment(model: ModelState, images: np.ndarray, batch: int = 8) -> np.ndarray:
    """Per-pixel argmax masks ``[N,1,H,W]`` (uint8)."""
    out = []
    for s in range(0, len(images), batch):
        logits = model.predict(np.asarray(images[s : s + batch], dtype=DTYPE))
        out.append(logits.argmax(axis=1)[:, None].astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0, 1, 1, 1), dtype=np.uint8)


def train_segmenter(model: ModelState, images, masks, cfg: TrainConfig,
                    val: tuple | None = None) -> tuple[ModelState, list[dict]]:
    """Per-pixel softmax cross-entropy against binary (pseudo-)masks.

    With ``val=(images, gt_masks)`` the best-validation-mIoU state is returned.
    """
    from .metrics import evaluate_set

    images = np.asarray(images, dtype=DTYPE)
    masks = np.asarray(masks)
    if images.shape[0] != masks.shape[0] or images.shape[-2:] != masks.shape[-2:]:
        raise ValueError(f"image batch {images.shape} and mask batch {masks.shape} differ in size")
    if np.any((masks != 0) & (masks != 1)):
        raise ValueError("masks must be binary")
    targets = masks.reshape(masks.shape[0], *masks.shape[-2:]).astype(np.int64)

    def evaluate(m):
        if val is None:
            return None
        return evaluate_set(segment(m, val[0]), val[1]).miou

    best, history = _run_epochs(model, images, targets, cfg, evaluate)
    for h in history:
        if "val" in h:
            h["val_miou"] = h.pop("val")
    return best, history


# --------------------------------------------------------------------------
# weight files
# --------------------------------------------------------------------------

MAGIC = b"RCMW"
VERSION = 1
ARCH_PREFIX = "arch:"


class WeightFileError(ValueError):
    """Malformed weight file; the message names the byte offset."""


def _arch_record(spec: ModelSpec) -> str:
    import json

    return ARCH_PREFIX + json.dumps({"arch": spec.arch, "options": spec.options}, sort_keys=True)


def save_model(state: ModelState, path) -> None:
    """Write the little-endian ``RCMW`` container with a trailing CRC32."""
    tensors = [(_arch_record(state.spec), np.zeros(1, dtype=DTYPE))]
    tensors += [(k, state.params[k]) for k in sorted(state.params)]
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def load_model(path) -> ModelState:
    import json

    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        # the last four bytes are the checksum
        if pos + n > len(data) - 4:
            raise WeightFileError(f"{path}: truncated while reading {what} at offset {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if len(data) < 16:
        raise WeightFileError(f"{path}: truncated file of {len(data)} bytes at offset {len(data)}")
    if data[:4] != MAGIC:
        raise WeightFileError(f"{path}: bad magic {data[:4]!r} at offset 0")
    pos = 4
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise WeightFileError(f"{path}: unsupported version {version} at offset 4")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    arch = None
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name_at = pos
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFileError(f"{path}: invalid UTF-8 name at offset {name_at}") from None
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(4 * n, f"payload of {name}"), dtype="<f4").reshape(dims).astype(DTYPE)
        if name.startswith(ARCH_PREFIX):
            arch = json.loads(name[len(ARCH_PREFIX) :])
        else:
            params[name] = arr
    crc_at = pos
    if len(data) - pos != 4:
        raise WeightFileError(f"{path}: expected 4-byte checksum at offset {crc_at}, found {len(data) - pos} bytes")
    (crc,) = struct.unpack("<I", data[pos:])
    if crc != zlib.crc32(data[:pos]) & 0xFFFFFFFF:
        raise WeightFileError(f"{path}: CRC32 mismatch at offset {crc_at}")
    if arch is None:
        raise WeightFileError(f"{path}: no architecture record")
    return ModelState(spec_from_options(arch["arch"], arch["options"]), params)
