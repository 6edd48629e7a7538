"""Dense double-precision tensors with tape-based reverse-mode differentiation.

Only the handful of operations the measurement and reconstruction networks
use are provided: strided 2-D convolution and its exact adjoint
(deconvolution), ReLU, elementwise add/mul, matrix product, reshape,
transpose, spatial crop and the mean-squared-error loss.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the output gradient to parent gradients.  :func:`backprop`
walks that graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DimensionError, GeometryError, NumericError

DTYPE = np.float64

# Multiplier applied to conv2d weight gradients; != 1 only under inject_gradient_fault().
_WEIGHT_GRAD_FAULT = 1.0

# When a list, relu() appends its activation mask here (used to spot kink crossings).
_RELU_MASKS = None


class Tensor:
    """A node in the computation graph holding a float64 ndarray."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A leaf tensor whose gradient accumulates across backprop calls."""

    __slots__ = ("id", "name", "grad", "trainable")
    _ids = itertools.count()

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(np.array(data, dtype=DTYPE, order="C"), requires_grad=trainable)
        self.id = next(Parameter._ids)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None)


# ---------------------------------------------------------------------------
# convolution kernels (plain ndarray in, ndarray out)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, k: int, s: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> strided view (N, C, Ho, Wo, k, k)
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]


# Strided kernels with at most this many taps use a shift-and-accumulate loop;
# larger ones go through a strided window view (few output positions, many taps).
_LOOP_TAPS = 25


# The tap loops stream whole (C, N, H, W) arrays once per tap; splitting the
# batch so each piece stays near L2 size roughly halves their run time.
_CHUNK_BYTES = 1 << 20


def _chunks(n: int, bytes_per_item: int) -> list:
    step = max(1, _CHUNK_BYTES // max(bytes_per_item, 1))
    return [slice(i, min(i + step, n)) for i in range(0, n, step)]


# Stride-1 small kernels (every 3x3 conv) take a faster route: the padded input
# is stored channel-last and flattened over space, so tap (a, b) is the same
# buffer shifted by a * Wp + b rows. Each L2-sized run of rows is unrolled into
# an im2col block and multiplied by the kernel matrix in one GEMM. Outputs are
# computed on the whole padded grid and the valid Ho x Wo corner is kept.


def _flat_channels_last(x: np.ndarray, pad: int, k: int) -> tuple:
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    rows = n * hp * wp
    buf = np.zeros((rows + (k - 1) * (wp + 1), c), dtype=DTYPE)
    buf[:rows].reshape(n, hp, wp, c)[:, pad:pad + h, pad:pad + w] = x.transpose(0, 2, 3, 1)
    return buf, rows, hp, wp


def _im2col_runs(buf: np.ndarray, rows: int, wp: int, k: int):
    c = buf.shape[1]
    offsets = [a * wp + b for a in range(k) for b in range(k)]
    step = max(64, _CHUNK_BYTES // (len(offsets) * c * buf.itemsize))
    cols = np.empty((step, len(offsets), c), dtype=DTYPE)
    for r0 in range(0, rows, step):
        m = min(step, rows - r0)
        for t, off in enumerate(offsets):
            cols[:m, t] = buf[r0 + off:r0 + off + m]
        yield r0, m, cols[:m].reshape(m, -1)


def _conv_s1(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    k = w.shape[-1]
    buf, rows, hp, wp = _flat_channels_last(x, pad, k)
    wmat = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(-1, w.shape[0])
    out = np.empty((rows, w.shape[0]), dtype=DTYPE)
    for r0, m, cols in _im2col_runs(buf, rows, wp, k):
        np.matmul(cols, wmat, out=out[r0:r0 + m])
    ho, wo = hp - k + 1, wp - k + 1
    out = out.reshape(x.shape[0], hp, wp, -1)[:, :ho, :wo]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_s1_weight_grad(x: np.ndarray, g: np.ndarray, k: int, pad: int) -> np.ndarray:
    buf, rows, hp, wp = _flat_channels_last(x, pad, k)
    n, f, ho, wo = g.shape
    gfull = np.zeros((n, hp, wp, f), dtype=DTYPE)
    gfull[:, :ho, :wo] = g.transpose(0, 2, 3, 1)
    gfull = gfull.reshape(rows, f)
    gw = np.zeros((k * k * x.shape[1], f), dtype=DTYPE)
    for r0, m, cols in _im2col_runs(buf, rows, wp, k):
        gw += cols.T @ gfull[r0:r0 + m]
    return np.ascontiguousarray(gw.reshape(k, k, x.shape[1], f).transpose(3, 2, 0, 1))


def _fast_s1(k: int, stride: int, pad: int) -> bool:
    return stride == 1 and k * k <= _LOOP_TAPS and pad <= k - 1


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    k = w.shape[-1]
    if _fast_s1(k, stride, pad):
        return _conv_s1(x, w, pad)
    if k * k > _LOOP_TAPS:
        out = np.tensordot(_windows(_pad(x, pad), k, stride), w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parts = _chunks(x.shape[0], x[0].nbytes)
    if len(parts) > 1:
        return np.concatenate([_conv_forward_taps(x[sl], w, stride, pad) for sl in parts])
    return _conv_forward_taps(x, w, stride, pad)


def _conv_forward_taps(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    k = w.shape[-1]
    xp = _pad(x, pad)
    n, _, hp, wp = xp.shape
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    xc = xp.transpose(1, 0, 2, 3)
    out = np.zeros((w.shape[0], n, ho, wo), dtype=DTYPE)
    for a in range(k):
        for b in range(k):
            tap = xc[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride]
            out += np.tensordot(w[:, :, a, b], tap, axes=([1], [0]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv_adjoint(g: np.ndarray, w: np.ndarray, stride: int, pad: int, out_hw: tuple) -> np.ndarray:
    """Scatter-accumulate ``g`` through ``w``: the transpose of :func:`conv_forward`."""
    k = w.shape[-1]
    if _fast_s1(k, stride, pad) and out_hw == (g.shape[2] + k - 1 - 2 * pad, g.shape[3] + k - 1 - 2 * pad):
        # stride-1 transpose = correlation with the flipped, channel-swapped kernel
        return _conv_s1(g, w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), k - 1 - pad)
    if w.shape[-1] ** 2 <= _LOOP_TAPS:
        parts = _chunks(g.shape[0], g[0].nbytes)
        if len(parts) > 1:
            return np.concatenate([_conv_adjoint(g[sl], w, stride, pad, out_hw) for sl in parts])
    return _conv_adjoint(g, w, stride, pad, out_hw)


def _conv_adjoint(g: np.ndarray, w: np.ndarray, stride: int, pad: int, out_hw: tuple) -> np.ndarray:
    n, _, ho, wo = g.shape
    c, k = w.shape[1], w.shape[-1]
    h, wd = out_hw
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    acc = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=DTYPE)
    if k * k > _LOOP_TAPS:
        cols = np.tensordot(w, g, axes=([0], [1]))  # (C, k, k, N, Ho, Wo)
        for a in range(k):
            for b in range(k):
                acc[:, :, a:a + hspan:stride, b:b + wspan:stride] += cols[:, a, b]
    else:
        gc = g.transpose(1, 0, 2, 3)
        for a in range(k):
            for b in range(k):
                acc[:, :, a:a + hspan:stride, b:b + wspan:stride] += np.tensordot(
                    w[:, :, a, b], gc, axes=([0], [0]))
    acc = acc.transpose(1, 0, 2, 3)
    if pad:
        acc = acc[:, :, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(acc)


def conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    if _fast_s1(k, stride, pad):
        return _conv_s1_weight_grad(x, g, k, pad)
    if k * k > _LOOP_TAPS:
        return np.tensordot(g, _windows(_pad(x, pad), k, stride), axes=([0, 2, 3], [0, 2, 3]))
    parts = _chunks(x.shape[0], x[0].nbytes + g[0].nbytes)
    gw = _conv_weight_grad_taps(x[parts[0]], g[parts[0]], k, stride, pad)
    for sl in parts[1:]:
        gw += _conv_weight_grad_taps(x[sl], g[sl], k, stride, pad)
    return gw


def _conv_weight_grad_taps(x: np.ndarray, g: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    xp = _pad(x, pad)
    _, _, ho, wo = g.shape
    gw = np.empty((g.shape[1], x.shape[1], k, k), dtype=DTYPE)
    for a in range(k):
        for b in range(k):
            tap = xp[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride]
            gw[:, :, a, b] = np.tensordot(g, tap, axes=([0, 2, 3], [0, 2, 3]))
    return gw


def conv_output_size(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise GeometryError(f"kernel size {k} exceeds padded {axis} extent {size + 2 * pad}")
    if span % stride:
        raise GeometryError(
            f"padded {axis} extent {size + 2 * pad} minus kernel {k} is not divisible by stride {stride}")
    return span // stride + 1


def deconv_output_size(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    out = (size - 1) * stride - 2 * pad + k
    if out <= 0:
        raise GeometryError(f"deconvolution {axis} output size {out} is not positive")
    return out


def _check_4d(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} must have 4 axes (N, C, H, W), got shape {x.shape}")


def _check_bias(b, cout: int) -> None:
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"bias must have shape ({cout},), got {b.shape}")


# ---------------------------------------------------------------------------
# differentiable operations


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Strided, zero-padded cross-correlation. ``w`` has shape (Cout, Cin, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_4d(x.data, "conv2d input")
    _check_4d(w.data, "conv2d kernel")
    cout, cin, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"kernel must be square, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise DimensionError(f"channel axis: input has {x.shape[1]} channels, kernel expects {cin}")
    _check_bias(None if b is None else b.data, cout)
    h, wd = x.shape[2:]
    conv_output_size(h, kh, stride, pad, "height")
    conv_output_size(wd, kw, stride, pad, "width")

    out = conv_forward(x.data, w.data, stride, pad)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        gx = conv_adjoint(g, w.data, stride, pad, (h, wd)) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = conv_weight_grad(x.data, g, kh, stride, pad) * _WEIGHT_GRAD_FAULT
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, backward)


def deconv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution, the exact adjoint of :func:`conv2d` with the same kernel array.

    ``w`` has shape (Cin, Cout, k, k); the output has spatial size
    ``(H - 1) * stride - 2 * pad + k``.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_4d(x.data, "deconv2d input")
    _check_4d(w.data, "deconv2d kernel")
    cin, cout, k, _ = w.shape
    if x.shape[1] != cin:
        raise DimensionError(f"channel axis: input has {x.shape[1]} channels, kernel expects {cin}")
    _check_bias(None if b is None else b.data, cout)
    h = deconv_output_size(x.shape[2], k, stride, pad, "height")
    wd = deconv_output_size(x.shape[3], k, stride, pad, "width")

    out = conv_adjoint(x.data, w.data, stride, pad, (h, wd))
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        gx = conv_forward(g, w.data, stride, pad) if x.requires_grad else None
        gw = conv_weight_grad(g, x.data, k, stride, pad) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    if _RELU_MASKS is not None:
        _RELU_MASKS.append(mask)
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inverse = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inverse),))


def crop(x, top: int, left: int, height: int, width: int) -> Tensor:
    """Differentiable spatial crop of the last two axes."""
    x = as_tensor(x)
    src = x.shape
    region = (..., slice(top, top + height), slice(left, left + width))

    def backward(g):
        full = np.zeros(src, dtype=DTYPE)
        full[region] = g
        return (full,)

    return _node(np.ascontiguousarray(x.data[region]), (x,), backward)


def residual_block(x, w1, b1, w2, b2) -> Tensor:
    """``x + conv(relu(conv(x, w1, b1)), w2, b2)`` with 3x3 kernels and no normalization."""
    for w in (w1, w2):
        k = as_tensor(w).shape[-1]
        if k != 3:
            raise DimensionError(f"residual block kernels must be 3x3, got {k}x{k}")
    h = relu(conv2d(x, w1, b1, stride=1, pad=1))
    return add(x, conv2d(h, w2, b2, stride=1, pad=1))


def mse_loss(pred, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: pred shape {pred.shape} != target shape {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = (2.0 / n) * g * diff
        return gp, -gp

    return _node(np.float64(np.mean(diff * diff)), (pred, target), backward)


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backprop(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``grad`` of every reachable trainable Parameter."""
    if loss.data.size != 1:
        raise ContractError(f"backprop needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


@contextlib.contextmanager
def inject_gradient_fault(scale: float = 1.01):
    """Test hook: scale every conv2d weight gradient so gradient checks must fail."""
    global _WEIGHT_GRAD_FAULT
    previous = _WEIGHT_GRAD_FAULT
    _WEIGHT_GRAD_FAULT = scale
    try:
        yield
    finally:
        _WEIGHT_GRAD_FAULT = previous


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam, updating parameters in place."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1), got ({beta1}, {beta2})")
        if not eps > 0:
            raise ConfigError(f"Adam epsilon must be positive, got {eps}")
        self.params = [p for p in params if p.trainable]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.id: np.zeros_like(p.data) for p in self.params}
        self.v = {p.id: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.id]
            v = self.v[p.id]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    tolerance: float
    per_parameter: dict = field(default_factory=dict)  # name -> max relative error
    probed: dict = field(default_factory=dict)  # name -> number of entries probed
    skipped: list = field(default_factory=list)  # non-trainable parameter names
    kinks: dict = field(default_factory=dict)  # name -> probes that flipped a ReLU mask at step h
    uncompared_probes: dict = field(default_factory=dict)  # name -> kink probes no smaller step resolved

    @property
    def max_rel_error(self) -> float:
        return max(self.per_parameter.values(), default=0.0)

    @property
    def uncompared(self) -> list:
        """Parameters whose every probe straddled a kink, so nothing was verified."""
        return [n for n, k in self.uncompared_probes.items() if k and k == self.probed[n]]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance and not self.uncompared

    def lines(self) -> list:
        out = []
        for name, err in self.per_parameter.items():
            line = f"{name:<24s} probed={self.probed[name]:<6d} max_rel_err={err:.3e}"
            if self.kinks.get(name):
                line += (f"  ({self.kinks[name]} kink-crossing probe(s), "
                         f"{self.uncompared_probes[name]} left uncompared)")
            out.append(line)
        out += [f"{name:<24s} non-trainable, excluded" for name in self.skipped]
        out += [f"{name:<24s} every probe crossed a kink, nothing compared" for name in self.uncompared]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"{verdict}: max relative error {self.max_rel_error:.3e} (tolerance {self.tolerance:.1e})")
        return out


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def _recorded(loss_fn):
    """Run ``loss_fn`` and return (loss value, ReLU masks seen during the forward pass)."""
    global _RELU_MASKS
    previous, _RELU_MASKS = _RELU_MASKS, []
    try:
        value = float(loss_fn().data)
        return value, _RELU_MASKS
    finally:
        _RELU_MASKS = previous


def _same_masks(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], tolerance: float,
                      h: float = 1e-5, max_entries: int | None = None, seed: int = 0,
                      skip_kinks: bool = True) -> GradCheckReport:
    """Compare backprop gradients against central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar loss.  With ``max_entries`` set, a seeded random subset
    of that many entries per parameter is probed instead of all of them.

    A probe whose +h or -h evaluation flips any ReLU activation straddles a
    kink, where the loss is not differentiable along that step and the
    difference quotient says nothing about the gradient.  Such probes are
    retried with steps h/10 and h/100; one that still crosses a kink is
    counted and left out of the comparison.  ``skip_kinks=False`` disables
    all of this and compares every raw quotient at step h.
    """
    report = GradCheckReport(tolerance=tolerance)
    trainable = [p for p in params if p.trainable]
    report.skipped = [p.name or str(p.id) for p in params if not p.trainable]
    zero_grad(trainable)
    backprop(loss_fn())
    _, base_masks = _recorded(loss_fn)
    rng = np.random.default_rng(seed)
    steps = (h, h / 10, h / 100) if skip_kinks else (h,)
    for p in trainable:
        label = p.name or str(p.id)
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst, kinks, uncompared = 0.0, 0, 0
        for i in idx:
            orig = flat[i]
            numeric, crossed = None, False
            for step in steps:
                flat[i] = orig + step
                up, up_masks = _recorded(loss_fn)
                flat[i] = orig - step
                down, down_masks = _recorded(loss_fn)
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericError(f"non-finite loss while probing parameter id {p.id} ({label})")
                if skip_kinks and not (_same_masks(up_masks, base_masks) and _same_masks(down_masks, base_masks)):
                    crossed = True
                    continue
                numeric = (up - down) / (2 * step)
                break
            kinks += crossed
            if numeric is None:
                uncompared += 1
                continue
            worst = max(worst, relative_error(analytic[i], numeric))
        report.per_parameter[label] = worst
        report.probed[label] = len(idx)
        report.kinks[label] = kinks
        report.uncompared_probes[label] = uncompared
    return report
