# tensor_core.py
# Dense tensors, the fixed op set used by the fusion network, and a recorded gradient tape

import math
import logging
import contextlib
import contextvars
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger("TensorCore")

MAX_RANK = 4
LEAKY_SLOPE = 0.1

_DTYPE = contextvars.ContextVar("tensor_dtype", default=np.float32)
_TAPE = contextvars.ContextVar("grad_tape", default=None)
_COUNTER = contextvars.ContextVar("op_counter", default=None)


class ShapeError(ValueError):
    """Shape contract violated; names the op and every shape involved"""

    def __init__(self, op: str, message: str, **shapes):
        self.op = op
        self.shapes = {name: tuple(shape) for name, shape in shapes.items()}
        described = ", ".join(f"{name}={shape}" for name, shape in self.shapes.items())
        text = f"{op}: {message}"
        if described:
            text = f"{text} ({described})"
        super().__init__(text)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Switch the default dtype, e.g. to float64 for gradient checks"""
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


def default_dtype():
    return _DTYPE.get()


class Tensor:
    """Row-major real array of rank 0-4 with an optional gradient accumulator"""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _DTYPE.get(), copy=True)
        if arr.ndim > MAX_RANK:
            raise ShapeError("Tensor", f"rank must be at most {MAX_RANK}", data=arr.shape)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return add(neg(self), other)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(self, other)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike, dtype=None) -> Tensor:
    """Wrap constants; tensors pass through untouched"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    """A tracked leaf tensor"""
    return Tensor(data, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class TapeNode:
    name: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradTape:
    """
    Ordered record of operations on tracked tensors. Use as a context
    manager; ops executed inside it are recorded when any input is tracked.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._token = None

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self) -> "GradTape":
        if self._token is not None:
            raise RuntimeError("GradTape is already active")
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE.reset(self._token)
        self._token = None


def _emit(name: str, arr: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap an op result and record it when a tape is active and any input is tracked"""
    out = Tensor._wrap(arr)
    tape = _TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(TapeNode(name, tuple(inputs), out, vjp))
    return out


def backward(tape: GradTape, loss: Tensor) -> List[Tensor]:
    """
    Reverse-mode sweep over the tape. Populates `.grad` on every tracked
    leaf reachable from `loss` and returns those leaves in first-use order.
    """
    if loss.size != 1:
        raise ShapeError("backward", "loss must be a scalar", loss=loss.shape)
    produced = {id(node.output) for node in tape.nodes}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: "OrderedDict[int, Tensor]" = OrderedDict()
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced and id(t) not in leaves:
                leaves[id(t)] = t

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.vjp(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
            key = id(t)
            grads[key] = gi if key not in grads else grads[key] + gi

    reached = []
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        reached.append(leaf)
    return reached


# ---------------------------------------------------------------------------
# Multiply-add counter
# ---------------------------------------------------------------------------

class OpCounter:
    """
    Counts multiply-adds of conv and matmul ops while active, grouped by
    the innermost `stage(...)` label.
    """

    def __init__(self):
        self.totals: "OrderedDict[str, int]" = OrderedDict()
        self._stages: List[str] = ["unattributed"]
        self._token = None

    def add(self, macs: int) -> None:
        label = self._stages[-1]
        self.totals[label] = self.totals.get(label, 0) + int(macs)

    def total(self) -> int:
        return sum(self.totals.values())

    def __enter__(self) -> "OpCounter":
        self._token = _COUNTER.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _COUNTER.reset(self._token)
        self._token = None


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    """Attribute counted multiply-adds to `name`; no-op without a counter"""
    counter = _COUNTER.get()
    if counter is None:
        yield
        return
    counter._stages.append(name)
    try:
        yield
    finally:
        counter._stages.pop()


def _count(macs: int) -> None:
    counter = _COUNTER.get()
    if counter is not None:
        counter.add(macs)


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, "operands must have identical shapes", a=a.shape, b=b.shape)


def _operand(value: TensorLike, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=like.data.dtype))


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    if b.ndim == 0 and a.ndim != 0:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, np.sum(g)))
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    if b.ndim == 0 and a.ndim != 0:
        return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -np.sum(g)))
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    if b.ndim == 0 and a.ndim != 0:
        return _emit("mul", a.data * b.data, (a, b),
                     lambda g: (g * b.data, np.sum(g * a.data)))
    _same_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    if b.ndim != 0 or a.ndim == 0:
        _same_shape("div", a, b)
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return ga, (np.sum(gb) if b.ndim == 0 and a.ndim != 0 else gb)
    return _emit("div", out, (a, b), vjp)


def abs_(a: Tensor) -> Tensor:
    return _emit("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    return _emit("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    positive = a.data > 0
    out = np.where(positive, a.data, slope * a.data)
    return _emit("leaky_relu", out, (a,), lambda g: (np.where(positive, g, slope * g),))


def sigmoid(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Logistic function, clipped to [eps, 1-eps] so outputs stay strictly inside (0, 1)"""
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    y = np.clip(y, eps, 1.0 - eps).astype(x.dtype)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def sum_(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _emit("sum", out, (a,), lambda g: (np.full(a.shape, g, dtype=a.data.dtype),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    return _emit("mean", out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted"""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)
    return _emit("softmax", y, (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    if out.ndim > MAX_RANK:
        raise ShapeError("reshape", f"rank must be at most {MAX_RANK}", target=out.shape)
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    for i, t in enumerate(tensors[1:], start=1):
        other = [s for j, s in enumerate(t.shape) if j != axis % t.ndim]
        base = [s for j, s in enumerate(ref.shape) if j != axis % ref.ndim]
        if t.ndim != ref.ndim or other != base:
            raise ShapeError("concat", f"operand {i} does not match operand 0 off the concat axis",
                             first=ref.shape, other=t.shape)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            parts.append(g[tuple(index)])
        return parts
    return _emit("concat", out, tensors, vjp)


def select(gate: np.ndarray, on: Tensor, off: Tensor) -> Tensor:
    """Per-pixel choice `on` where gate is set else `off`, broadcast over channels"""
    _same_shape("select", on, off)
    gate = np.asarray(gate).astype(bool)
    if gate.shape != on.shape[-2:]:
        raise ShapeError("select", "gate must match the spatial extent", gate=gate.shape, features=on.shape)
    out = np.where(gate, on.data, off.data)
    zero = np.zeros((), dtype=on.data.dtype)
    return _emit("select", out, (on, off),
                 lambda g: (np.where(gate, g, zero), np.where(gate, zero, g)))


def channel_gate(x: Tensor, gate: TensorLike) -> Tensor:
    """x (C,H,W) times gate (H,W), broadcast over channels"""
    gate = _operand(gate, x)
    if x.ndim != 3 or gate.shape != x.shape[1:]:
        raise ShapeError("channel_gate", "gate must be H×W for a C×H×W input", x=x.shape, gate=gate.shape)
    out = x.data * gate.data[None]
    return _emit("channel_gate", out, (x, gate),
                 lambda g: (g * gate.data[None], np.sum(g * x.data, axis=0)))


def weighted_sum(tensors: Sequence[Tensor], weights: Tensor) -> Tensor:
    """sum_i weights[i] * tensors[i]"""
    if weights.shape != (len(tensors),):
        raise ShapeError("weighted_sum", "one weight per tensor required",
                         weights=weights.shape, count=(len(tensors),))
    for t in tensors[1:]:
        _same_shape("weighted_sum", tensors[0], t)
    out = np.zeros_like(tensors[0].data)
    for w, t in zip(weights.data, tensors):
        out = out + w * t.data

    def vjp(g):
        grads = [g * w for w in weights.data]
        gw = np.array([np.sum(g * t.data) for t in tensors], dtype=weights.data.dtype)
        return grads + [gw]
    return _emit("weighted_sum", out, list(tensors) + [weights], vjp)


# ---------------------------------------------------------------------------
# Convolutions and pooling
# ---------------------------------------------------------------------------

def _windows(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded k×k windows of a C×H×W array: C×H×W×k×k"""
    r = k // 2
    padded = np.pad(x, ((0, 0), (r, r), (r, r)))
    return sliding_window_view(padded, (k, k), axis=(1, 2))


def _correlate(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size zero-padded cross-correlation: (C,H,W) with (O,C,k,k) -> (O,H,W)"""
    windows = _windows(x, kernel.shape[-1])
    return np.tensordot(kernel, windows, axes=([1, 2, 3], [0, 3, 4]))


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 same-padded convolution (cross-correlation form), C_in×H×W -> C_out×H×W"""
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError("conv2d", "expected C×H×W input and C_out×C_in×k×k kernel",
                         input=x.shape, kernel=kernel.shape)
    c_out, c_in, kh, kw = kernel.shape
    if c_in != x.shape[0]:
        raise ShapeError("conv2d", f"kernel expects {c_in} input channels but input has {x.shape[0]}",
                         input=x.shape, kernel=kernel.shape)
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d", "kernel must be square with odd size", kernel=kernel.shape)
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("conv2d", "bias must have one entry per output channel",
                         kernel=kernel.shape, bias=bias.shape)
    _, h, w = x.shape
    _count(h * w * c_out * c_in * kh * kw)
    out = _correlate(x.data, kernel.data)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = out.astype(x.data.dtype, copy=False)

    def vjp(g):
        windows = _windows(x.data, kh)
        gk = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = _correlate(g, flipped)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", out, inputs, vjp)


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel spatial convolution, kernel C×k×k"""
    if x.ndim != 3 or kernel.ndim != 3 or kernel.shape[0] != x.shape[0]:
        raise ShapeError("depthwise_conv2d", "kernel must be C×k×k with C matching the input",
                         input=x.shape, kernel=kernel.shape)
    c, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError("depthwise_conv2d", "kernel must be square with odd size", kernel=kernel.shape)
    if bias is not None and bias.shape != (c,):
        raise ShapeError("depthwise_conv2d", "bias must have one entry per channel",
                         kernel=kernel.shape, bias=bias.shape)
    _, h, w = x.shape
    _count(h * w * c * kh * kw)
    windows = _windows(x.data, kh)
    out = np.einsum("chwij,cij->chw", windows, kernel.data)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = out.astype(x.data.dtype, copy=False)

    def vjp(g):
        gk = np.einsum("chw,chwij->cij", g, windows)
        gx = np.einsum("chwij,cij->chw", _windows(g, kh), kernel.data[:, ::-1, ::-1])
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("depthwise_conv2d", out, inputs, vjp)


def depthwise_separable(x: Tensor, dw_kernel: Tensor, pw_kernel: Tensor) -> Tensor:
    """Depthwise k×k followed by 1×1 channel mixing; pw_kernel is C_out×C (or C_out×C×1×1)"""
    if pw_kernel.ndim == 2:
        pw_kernel = reshape(pw_kernel, pw_kernel.shape + (1, 1))
    if pw_kernel.shape[1] != x.shape[0]:
        raise ShapeError("depthwise_separable", "pointwise kernel must mix the input channels",
                         input=x.shape, pw_kernel=pw_kernel.shape)
    return conv2d(depthwise_conv2d(x, dw_kernel), pw_kernel)


def avg_pool(x: Tensor, p: int) -> Tensor:
    """Mean over non-overlapping p×p blocks of the last two axes"""
    h, w = x.shape[-2:]
    if p < 1 or h % p or w % p:
        raise ShapeError("avg_pool", f"extents must be divisible by p={p}; pad the input to a multiple of p first",
                         input=x.shape)
    lead = x.shape[:-2]
    blocks = x.data.reshape(lead + (h // p, p, w // p, p))
    out = blocks.mean(axis=(-3, -1))

    def vjp(g):
        spread = np.repeat(np.repeat(g, p, axis=-2), p, axis=-1)
        return (spread / (p * p),)
    return _emit("avg_pool", out, (x,), vjp)


def box_filter(x: Tensor, size: int) -> Tensor:
    """Valid-mode mean over size×size windows of an H×W tensor"""
    if x.ndim != 2 or x.shape[0] < size or x.shape[1] < size:
        raise ShapeError("box_filter", f"needs an H×W input of at least {size}×{size}", input=x.shape)
    out = sliding_window_view(x.data, (size, size)).mean(axis=(-2, -1))
    ho, wo = out.shape

    def vjp(g):
        gx = np.zeros_like(x.data)
        scaled = g / (size * size)
        for i in range(size):
            for j in range(size):
                gx[i:i + ho, j:j + wo] += scaled
        return (gx,)
    return _emit("box_filter", out, (x,), vjp)


def pad2d(x: Tensor, bottom: int, right: int) -> Tensor:
    """Zero-extend the last two axes at the bottom and right"""
    if bottom == 0 and right == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(0, bottom), (0, right)]
    out = np.pad(x.data, widths)
    h, w = x.shape[-2:]
    return _emit("pad2d", out, (x,), lambda g: (g[..., :h, :w],))


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left height×width window of the last two axes"""
    if x.shape[-2:] == (height, width):
        return x
    out = x.data[..., :height, :width].copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., :height, :width] = g
        return (gx,)
    return _emit("crop2d", out, (x,), vjp)


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------

def bilinear_sample(feature: Tensor, flow: TensorLike) -> Tensor:
    """
    Backward warp: out(p) = feature(p + flow(p)) read bilinearly, sampling
    coordinates clamped to the image. `flow` is H×W×2 holding (dx, dy).
    Gradients reach the flow only when it is a tracked Tensor.
    """
    if feature.ndim != 3:
        raise ShapeError("bilinear_sample", "feature must be C×H×W", feature=feature.shape)
    flow_t = flow if isinstance(flow, Tensor) else None
    flow_arr = (flow.data if flow_t is not None else np.asarray(flow)).astype(feature.data.dtype, copy=False)
    c, h, w = feature.shape
    if flow_arr.shape != (h, w, 2):
        raise ShapeError("bilinear_sample", "flow must be H×W×2 matching the feature",
                         feature=feature.shape, flow=flow_arr.shape)

    xs = np.arange(w, dtype=flow_arr.dtype)[None, :] + flow_arr[..., 0]
    ys = np.arange(h, dtype=flow_arr.dtype)[:, None] + flow_arr[..., 1]
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xc - x0
    wy = yc - y0

    f = feature.data
    v00 = f[:, y0, x0]
    v01 = f[:, y0, x1]
    v10 = f[:, y1, x0]
    v11 = f[:, y1, x1]
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    out = out.astype(f.dtype, copy=False)

    def vjp(g):
        gf = np.zeros((c, h * w), dtype=f.dtype)
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            flat = (yy * w + xx).reshape(-1)
            np.add.at(gf, (slice(None), flat), (g * ww).reshape(c, -1))
        grads = [gf.reshape(c, h, w)]
        if flow_t is not None:
            inside_x = (xs > 0) & (xs < w - 1)
            inside_y = (ys > 0) & (ys < h - 1)
            d_wx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            d_wy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
            gflow = np.stack([np.sum(g * d_wx, axis=0) * inside_x,
                              np.sum(g * d_wy, axis=0) * inside_y], axis=-1)
            grads.append(gflow)
        return grads
    inputs = (feature, flow_t) if flow_t is not None else (feature,)
    return _emit("bilinear_sample", out, inputs, vjp)


def chw_to_flow(x: Tensor) -> Tensor:
    """2×H×W channels -> H×W×2 flow layout"""
    if x.ndim != 3 or x.shape[0] != 2:
        raise ShapeError("chw_to_flow", "expected a 2×H×W tensor", input=x.shape)
    out = np.ascontiguousarray(x.data.transpose(1, 2, 0))
    return _emit("chw_to_flow", out, (x,), lambda g: (g.transpose(2, 0, 1),))


# ---------------------------------------------------------------------------
# Token ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """(m×n) @ (n×q), or a @ b.T when transpose_b"""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul", "operands must be matrices", a=a.shape, b=b.shape)
    bm = b.data.T if transpose_b else b.data
    if a.shape[1] != bm.shape[0]:
        raise ShapeError("matmul", "inner dimensions differ", a=a.shape, b=b.shape)
    m, n = a.shape
    q = bm.shape[1]
    _count(m * n * q)
    out = a.data @ bm

    def vjp(g):
        ga = g @ bm.T
        gb = g.T @ a.data if transpose_b else a.data.T @ g
        return ga, gb
    return _emit("matmul", out, (a, b), vjp)


def patchify(x: Tensor, p: int) -> Tensor:
    """C×H×W -> N×(C·p·p) tokens; patch n = gy*(W/p)+gx, channel-major flattening"""
    c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError("patchify", f"extents must be divisible by p={p}", input=x.shape)
    gh, gw = h // p, w // p
    out = x.data.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * p * p)

    def vjp(g):
        return (g.reshape(gh, gw, c, p, p).transpose(2, 0, 3, 1, 4).reshape(c, h, w),)
    return _emit("patchify", out, (x,), vjp)


def unpatchify(tokens: Tensor, channels: int, height: int, width: int, p: int) -> Tensor:
    """Inverse of patchify"""
    gh, gw = height // p, width // p
    if tokens.shape != (gh * gw, channels * p * p):
        raise ShapeError("unpatchify", "token matrix does not match the patch grid",
                         tokens=tokens.shape, grid=(gh, gw, channels, p))
    out = tokens.data.reshape(gh, gw, channels, p, p).transpose(2, 0, 3, 1, 4).reshape(channels, height, width)

    def vjp(g):
        return (g.reshape(channels, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, -1),)
    return _emit("unpatchify", out, (tokens,), vjp)


def gather_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError("gather_rows", "row index out of range", rows=(x.shape[0],), index=index.shape)
    out = x.data[index]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)
    return _emit("gather_rows", out, (x,), vjp)


def scatter_rows(x: Tensor, index: Sequence[int], rows: int) -> Tensor:
    """Place row i of x at row index[i] of a rows×d zero matrix"""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise ShapeError("scatter_rows", f"row index out of range for {rows} rows",
                         tokens=x.shape, index=index.shape)
    out = np.zeros((rows,) + x.shape[1:], dtype=x.data.dtype)
    out[index] = x.data
    return _emit("scatter_rows", out, (x,), lambda g: (g[index],))


def mean_rows(x: Tensor) -> Tensor:
    n = x.shape[0]
    out = x.data.mean(axis=0)
    return _emit("mean_rows", out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """Add one d-vector to every row of an N×d matrix"""
    if x.ndim != 2 or row.shape != (x.shape[1],):
        raise ShapeError("add_row", "row must match the matrix width", matrix=x.shape, row=row.shape)
    return _emit("add_row", x.data + row.data[None], (x, row), lambda g: (g, g.sum(axis=0)))


def scale_rows(x: Tensor, weights: TensorLike) -> Tensor:
    """Multiply row i by weights[i]"""
    weights = _operand(weights, x)
    if x.ndim != 2 or weights.shape != (x.shape[0],):
        raise ShapeError("scale_rows", "one weight per row required", matrix=x.shape, weights=weights.shape)
    out = x.data * weights.data[:, None]
    return _emit("scale_rows", out, (x, weights),
                 lambda g: (g * weights.data[:, None], np.sum(g * x.data, axis=1)))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar fn() with respect to target.data"""
    grad = np.zeros_like(target.data, dtype=np.float64)
    flat = target.data.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        plus = float(fn().item())
        flat[i] = saved - h
        minus = float(fn().item())
        flat[i] = saved
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return grad


def analytic_gradients(fn: Callable[[], Tensor], targets: Sequence[Tensor]) -> List[np.ndarray]:
    for t in targets:
        t.requires_grad = True
        t.grad = None
    with GradTape() as tape:
        loss = fn()
    backward(tape, loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Max elementwise |a-n| / max(|a|, |n|, floor)"""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def gradient_check(fn: Callable[[], Tensor], targets: Sequence[Tensor], h: float = 1e-4) -> float:
    """Worst relative error between tape gradients and central differences over all targets"""
    analytic = analytic_gradients(fn, targets)
    worst = 0.0
    for t, a in zip(targets, analytic):
        numeric = numerical_gradient(fn, t, h)
        err = relative_error(a, numeric)
        logger.debug(f"gradient check {t.shape}: rel err {err:.3e}")
        worst = max(worst, err)
    return worst


def he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int, gain: float = math.sqrt(2.0)) -> np.ndarray:
    return rng.normal(0.0, gain / math.sqrt(max(fan_in, 1)), size=tuple(shape))
