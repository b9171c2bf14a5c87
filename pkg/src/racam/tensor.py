"""Dense float32 tensors and a reverse-mode differentiation tape.

Values are stored as 32-bit floats. Convolutions, matrix products and
reductions accumulate in float64 and round once on output, so results do not
depend on BLAS blocking for the float32 path.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` on raw arrays and a ``backward`` that maps the output gradient to
input gradients. Activation functions consult the :class:`PropagationMode`
handed to ``backward``; all other operations use exact calculus.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import fgbp as _rules
from .fgbp import PropagationMode

__all__ = [
    "Tensor",
    "Function",
    "Tape",
    "ShapeError",
    "PropagationMode",
    "backward",
    "finite_diff_gradient",
    "conv2d",
    "leaky_relu",
    "maxpool2d",
    "global_avg_pool",
    "linear",
    "softmax_cross_entropy",
    "bilinear_resize",
]

DTYPE = np.float32
ACC = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class Tensor:
    """An immutable float32 array that may be a node of a recorded graph."""

    __slots__ = ("data", "requires_grad", "name", "_ctx")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._ctx: Function | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


class Function:
    """Base class for recorded operations."""

    def __init__(self, *parents: Tensor, **kwargs):
        self.parents = parents
        self.kwargs = kwargs
        self.needs_input_grad = tuple(p.requires_grad for p in parents)

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, mode: PropagationMode) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, name: str | None = None, **kwargs) -> Tensor:
        fn = cls(*tensors, **kwargs)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        res = Tensor(out, requires_grad=any(fn.needs_input_grad), name=name)
        if res.requires_grad:
            res._ctx = fn
        return res


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def _im2col(xh: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """``[N,H,W,C]`` (already padded) to ``[N,Ho,Wo,C*kh*kw]`` patch rows."""
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return win.reshape(*win.shape[:3], -1)


class Conv2d(Function):
    def forward(self, x, w, b, stride=1, pad=0):
        if stride < 1 or pad < 0:
            raise ValueError(f"conv2d: invalid stride={stride} pad={pad}")
        self.batched = x.ndim == 4
        xb = x if self.batched else x[None]
        if xb.ndim != 4 or w.ndim != 4 or b.shape != (w.shape[0],) or xb.shape[1] != w.shape[1]:
            raise ShapeError(
                f"conv2d: input {tuple(x.shape)} incompatible with weight {tuple(w.shape)} "
                f"and bias {tuple(b.shape)}"
            )
        kh, kw = w.shape[2:]
        H, W = xb.shape[2:]
        if kh > H + 2 * pad or kw > W + 2 * pad:
            raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(H + 2 * pad, W + 2 * pad)}")
        # channels-last patches keep the (C, kh, kw) order of the weight rows
        xh = np.pad(xb.transpose(0, 2, 3, 1).astype(ACC), ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        self.cols = _im2col(xh, kh, kw, stride)
        self.in_shape = xb.shape
        self.w = w
        out = self.cols @ w.reshape(w.shape[0], -1).T.astype(ACC) + b.astype(ACC)
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2), dtype=DTYPE)
        return out if self.batched else out[0]

    def backward(self, grad, mode):
        stride, pad = self.kwargs.get("stride", 1), self.kwargs.get("pad", 0)
        g = grad if self.batched else grad[None]
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1), dtype=ACC)  # N,Ho,Wo,O
        O, C, kh, kw = self.w.shape
        N, _, H, W = self.in_shape
        dx = dw = db = None
        if self.needs_input_grad[0]:
            if stride == 1 and pad <= min(kh, kw) - 1:
                # full correlation with the flipped, transposed kernel
                ph, pw = kh - 1 - pad, kw - 1 - pad
                gp = np.pad(gh, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
                wf = self.w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1).astype(ACC)
                dxh = _im2col(gp, kh, kw, 1) @ wf.T
            else:
                Ho, Wo = gh.shape[1:3]
                dcols = gh @ self.w.reshape(O, -1).astype(ACC)
                dcols = dcols.reshape(N, Ho, Wo, C, kh, kw)
                dxp = np.zeros((N, H + 2 * pad, W + 2 * pad, C), dtype=ACC)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[..., i, j]
                dxh = dxp[:, pad : pad + H, pad : pad + W]
            dx = np.ascontiguousarray(dxh.transpose(0, 3, 1, 2), dtype=DTYPE)
            if not self.batched:
                dx = dx[0]
        if self.needs_input_grad[1]:
            gm = gh.reshape(-1, O)
            dw = (gm.T @ self.cols.reshape(gm.shape[0], -1)).reshape(self.w.shape).astype(DTYPE)
        if self.needs_input_grad[2]:
            db = gh.sum(axis=(0, 1, 2)).astype(DTYPE)
        return dx, dw, db


class LeakyReLU(Function):
    def forward(self, x, slope=0.0):
        if not 0.0 <= slope < 1.0:
            raise ValueError(f"leaky_relu: slope must lie in [0, 1), got {slope}")
        self.x = x
        return np.where(x > 0, x, DTYPE(slope) * x)

    def backward(self, grad, mode):
        return (_rules.activation_backward(grad, self.x, mode, self.kwargs.get("slope", 0.0)),)


class Standardize(Function):
    """Per-sample zero mean, unit variance over ``[C,H,W]``; a constant input maps to zeros."""

    def forward(self, x, eps=1e-6):
        if x.ndim < 3:
            raise ShapeError(f"standardize: expected [C,H,W] or [N,C,H,W], got {x.shape}")
        axes = tuple(range(x.ndim - 3, x.ndim))
        xa = x.astype(ACC)
        centred = xa - xa.mean(axis=axes, keepdims=True)
        self.sigma = np.sqrt((centred ** 2).mean(axis=axes, keepdims=True) + eps)
        self.y = centred / self.sigma
        self.axes = axes
        return self.y.astype(DTYPE)

    def backward(self, grad, mode):
        g = grad.astype(ACC)
        mean_g = g.mean(axis=self.axes, keepdims=True)
        mean_gy = (g * self.y).mean(axis=self.axes, keepdims=True)
        return (((g - mean_g - self.y * mean_gy) / self.sigma).astype(DTYPE),)


class MaxPool2d(Function):
    def forward(self, x, k=2, stride=2):
        if k <= 0 or stride <= 0:
            raise ValueError(f"maxpool2d: k and stride must be positive, got k={k} stride={stride}")
        self.batched = x.ndim == 4
        xb = x if self.batched else x[None]
        N, C, H, W = xb.shape
        if k > H or k > W:
            raise ShapeError(f"maxpool2d: window {k} larger than input {(H, W)}")
        win = sliding_window_view(xb, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        Ho, Wo = win.shape[2:4]
        flat = win.reshape(N, C, Ho, Wo, k * k)
        arg = flat.argmax(axis=-1)  # first occurrence in row-major window order
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        rows = np.arange(Ho)[:, None] * stride + arg // k
        cols = np.arange(Wo)[None, :] * stride + arg % k
        self.index = (rows * W + cols).reshape(N, C, -1)
        self.in_shape = xb.shape
        return out if self.batched else out[0]

    def backward(self, grad, mode):
        g = grad if self.batched else grad[None]
        N, C, H, W = self.in_shape
        base = (np.arange(N * C) * (H * W)).reshape(N, C, 1)
        flat_idx = (self.index + base).ravel()
        dx = np.bincount(flat_idx, weights=g.astype(ACC).ravel(), minlength=N * C * H * W)
        dx = dx.reshape(self.in_shape).astype(DTYPE)
        return (dx if self.batched else dx[0],)


class GlobalAvgPool(Function):
    def forward(self, x):
        if x.ndim < 3 or x.shape[-1] < 1 or x.shape[-2] < 1:
            raise ShapeError(f"global_avg_pool: expected [..., C, H, W], got {x.shape}")
        self.in_shape = x.shape
        return x.astype(ACC).mean(axis=(-2, -1)).astype(DTYPE)

    def backward(self, grad, mode):
        H, W = self.in_shape[-2:]
        g = grad.astype(ACC)[..., None, None] / (H * W)
        return (np.broadcast_to(g, self.in_shape).astype(DTYPE),)


class Linear(Function):
    def forward(self, x, w, b):
        if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],) or x.ndim > 2:
            raise ShapeError(
                f"linear: input {tuple(x.shape)} incompatible with weight {tuple(w.shape)} "
                f"and bias {tuple(b.shape)}"
            )
        self.x, self.w = x, w
        return (x.astype(ACC) @ w.astype(ACC).T + b.astype(ACC)).astype(DTYPE)

    def backward(self, grad, mode):
        g = grad.astype(ACC)
        dx = dw = db = None
        if self.needs_input_grad[0]:
            dx = (g @ self.w.astype(ACC)).astype(DTYPE)
        if self.needs_input_grad[1]:
            x = self.x.astype(ACC)
            dw = (np.outer(g, x) if g.ndim == 1 else g.T @ x).astype(DTYPE)
        if self.needs_input_grad[2]:
            db = (g if g.ndim == 1 else g.sum(axis=0)).astype(DTYPE)
        return dx, dw, db


class SoftmaxCrossEntropy(Function):
    """Mean cross-entropy; the class axis is 0 for a single vector, else 1."""

    def forward(self, logits, labels=None):
        z = logits.astype(ACC)
        axis = 0 if z.ndim == 1 else 1
        K = z.shape[axis]
        lab = np.asarray(labels)
        if not np.issubdtype(lab.dtype, np.integer):
            raise ValueError("softmax_cross_entropy: labels must be integers")
        expect = z.shape[:axis] + z.shape[axis + 1 :]
        if lab.shape != expect:
            raise ShapeError(f"softmax_cross_entropy: labels {lab.shape} do not match logits {z.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= K):
            raise ValueError(f"softmax_cross_entropy: label out of range [0, {K})")
        zc = np.moveaxis(z, axis, -1).reshape(-1, K)
        lab = lab.reshape(-1)
        zmax = zc.max(axis=1, keepdims=True)
        e = np.exp(zc - zmax)
        s = e.sum(axis=1, keepdims=True)
        logp = zc - zmax - np.log(s)
        self.prob = e / s
        self.lab = lab
        self.axis = axis
        self.z_shape = z.shape
        return np.array([-logp[np.arange(lab.size), lab].mean()], dtype=DTYPE)

    def backward(self, grad, mode):
        M = self.lab.size
        d = self.prob.copy()
        d[np.arange(M), self.lab] -= 1.0
        d *= float(grad.reshape(-1)[0]) / M
        moved = self.z_shape[: self.axis] + self.z_shape[self.axis + 1 :] + (self.z_shape[self.axis],)
        d = np.moveaxis(d.reshape(moved), -1, self.axis)
        return (d.astype(DTYPE),)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=ACC)
    if n_out == 1:
        src = np.array([(n_in - 1) / 2.0])
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.clip(np.floor(src).astype(int), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


class BilinearResize(Function):
    def forward(self, x, out_h=1, out_w=1):
        if out_h < 1 or out_w < 1:
            raise ValueError(f"bilinear_resize: output size must be positive, got {(out_h, out_w)}")
        H, W = x.shape[-2:]
        self.identity = (H, W) == (out_h, out_w)
        if self.identity:
            return x.copy()
        self.ry = _interp_matrix(H, out_h)
        self.rx = _interp_matrix(W, out_w)
        return (self.ry @ x.astype(ACC) @ self.rx.T).astype(DTYPE)

    def backward(self, grad, mode):
        if self.identity:
            return (grad.copy(),)
        return ((self.ry.T @ grad.astype(ACC) @ self.rx).astype(DTYPE),)


def conv2d(x, weight, bias, stride: int = 1, pad: int = 0, name: str | None = None) -> Tensor:
    """Cross-correlation with zero padding on ``[C,H,W]`` or ``[N,C,H,W]`` input."""
    return Conv2d.apply(_as_tensor(x), _as_tensor(weight), _as_tensor(bias), stride=stride, pad=pad, name=name)


def leaky_relu(x, slope: float = 0.0, name: str | None = None) -> Tensor:
    return LeakyReLU.apply(_as_tensor(x), slope=slope, name=name)


def standardize(x, eps: float = 1e-6, name: str | None = None) -> Tensor:
    return Standardize.apply(_as_tensor(x), eps=eps, name=name)


def maxpool2d(x, k: int = 2, stride: int = 2, name: str | None = None) -> Tensor:
    return MaxPool2d.apply(_as_tensor(x), k=k, stride=stride, name=name)


def global_avg_pool(x, name: str | None = None) -> Tensor:
    return GlobalAvgPool.apply(_as_tensor(x), name=name)


def linear(x, weight, bias, name: str | None = None) -> Tensor:
    return Linear.apply(_as_tensor(x), _as_tensor(weight), _as_tensor(bias), name=name)


def softmax_cross_entropy(logits, labels, name: str | None = None) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over every labelled position."""
    return SoftmaxCrossEntropy.apply(_as_tensor(logits), labels=labels, name=name)


def bilinear_resize(x, out_h: int, out_w: int, name: str | None = None) -> Tensor:
    """Align-corners bilinear interpolation over the last two axes."""
    return BilinearResize.apply(_as_tensor(x), out_h=out_h, out_w=out_w, name=name)


# --------------------------------------------------------------------------
# tape and reverse pass
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    id: int
    tensor: Tensor
    inputs: tuple[int, ...]

    @property
    def fn(self) -> Function | None:
        return self.tensor._ctx

    @property
    def kind(self) -> str:
        return "leaf" if self.fn is None else type(self.fn).__name__


class Tape:
    """Topologically ordered record of the computation that produced ``output``."""

    def __init__(self, nodes: list[Node], output_id: int):
        self.nodes = nodes
        self.output_id = output_id
        self._by_name = {n.tensor.name: n for n in nodes if n.tensor.name}

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        ids: dict[int, int] = {}
        nodes: list[Node] = []
        # iterative post-order DFS; parents are visited in argument order
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if id(t) in ids:
                continue
            parents = t._ctx.parents if t._ctx is not None else ()
            if expanded or not parents:
                nid = len(nodes)
                ids[id(t)] = nid
                nodes.append(Node(nid, t, tuple(ids[id(p)] for p in parents)))
                continue
            stack.append((t, True))
            for p in reversed(parents):
                if id(p) not in ids:
                    stack.append((p, False))
        return cls(nodes, ids[id(output)])

    @property
    def output(self) -> Tensor:
        return self.nodes[self.output_id].tensor

    def names(self) -> list[str]:
        return list(self._by_name)

    def activation_names(self) -> list[str]:
        return [n.tensor.name for n in self.nodes if n.tensor.name and isinstance(n.fn, LeakyReLU)]

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._by_name[name].tensor.data
        except KeyError:
            raise KeyError(f"no recorded tensor named {name!r}") from None

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward from the leaves."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            fn = node.fn
            if fn is None:
                values.append(node.tensor.data)
                continue
            fresh = type(fn)(*fn.parents, **fn.kwargs)
            out = fresh.forward(*(values[i] for i in node.inputs), **fn.kwargs)
            values.append(np.asarray(out, dtype=DTYPE))
        return values


STANDARD = PropagationMode("standard")


def backward(
    tape: Tape,
    wrt: int | None = None,
    mode: PropagationMode = STANDARD,
    layers: Iterable[str] | None = None,
) -> dict[str, np.ndarray]:
    """Reverse pass over ``tape``.

    ``wrt`` selects the class whose pre-softmax score is seeded with 1 (every
    row of a batched output); with ``wrt=None`` the output must be a scalar
    loss. Returns gradients of every named node, or only those in ``layers``.
    """
    out = tape.output
    if wrt is None:
        if out.data.size != 1:
            raise ValueError("backward: a class index is required for a non-scalar output")
        seed = np.ones_like(out.data)
    else:
        K = out.shape[-1]
        if not 0 <= wrt < K:
            raise ValueError(f"backward: class {wrt} outside [0, {K})")
        seed = np.zeros_like(out.data)
        seed[..., wrt] = 1.0

    if layers is not None:
        layers = list(layers)
        missing = [n for n in layers if n not in tape._by_name]
        if missing:
            raise KeyError(f"backward: unknown layer id(s) {missing}")

    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[tape.output_id] = seed
    for node in reversed(tape.nodes[: tape.output_id + 1]):
        g = grads[node.id]
        if g is None or node.fn is None:
            continue
        in_grads = node.fn.backward(g, mode)
        for pid, gi in zip(node.inputs, in_grads):
            if gi is None or not tape.nodes[pid].tensor.requires_grad:
                continue
            grads[pid] = gi if grads[pid] is None else (grads[pid] + gi).astype(DTYPE)

    wanted = layers if layers is not None else tape.names()
    result = {}
    for name in wanted:
        node = tape._by_name[name]
        g = grads[node.id]
        result[name] = np.zeros_like(node.tensor.data) if g is None else g
    return result


def finite_diff_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float | None = None) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every element.

    With ``h=None`` the step is ``1e-2 * max(1, |x_i|)`` per element.
    """
    if h is not None and h <= 0:
        raise ValueError("finite_diff_gradient: h must be positive")
    x = np.array(x, dtype=ACC)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        step = h if h is not None else 1e-2 * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad
