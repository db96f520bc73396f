"""Dense tensors with reverse-mode differentiation.

4-D activations are logically NCHW.  ``conv2d`` and ``concat_channels``
return arrays whose *memory* is NHWC (an NCHW-shaped transposed view),
which lets the next convolution build its patch matrix without a copy.
Every other op is layout agnostic.

Precision follows the data: float64 arrays give the "oracle mode" used by
gradient checks, float32 arrays the training mode.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, UsageError

BCE_CLAMP = 1e-7

_grad_enabled = True
_tracers: list[list["OpRecord"]] = []


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording; intermediate arrays are freed eagerly."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@dataclass
class OpRecord:
    op: str
    inputs: tuple
    output: tuple
    attrs: dict = field(default_factory=dict)


@contextlib.contextmanager
def trace() -> Iterator[list[OpRecord]]:
    """Collect an :class:`OpRecord` for every primitive executed inside the block."""
    records: list[OpRecord] = []
    _tracers.append(records)
    try:
        yield records
    finally:
        _tracers.remove(records)


def _record(op: str, inputs, output, **attrs) -> None:
    if _tracers:
        rec = OpRecord(op, tuple(tuple(s) for s in inputs), tuple(output), attrs)
        for r in _tracers:
            r.append(rec)


class Tensor:
    """An ndarray plus the bookkeeping needed for backpropagation.

    Leaves (tensors not produced by an op) accumulate into ``grad`` on every
    :meth:`backward` call; call :meth:`zero_grad` between steps.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tsum(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                else:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ConfigurationError(f"{what} must be 4-D NCHW, got shape {x.shape}")


# ---------------------------------------------------------------- convolution

def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


@dataclass
class _ConvCtx:
    x_shape: tuple
    w: np.ndarray
    saved: Optional[np.ndarray]  # patch matrix (input-side) or NHWC input (output-side)
    stride: int
    padding: int
    dilation: int
    need: tuple  # (input, weight, bias)
    output_side: bool


def _tap_slices(i: int, j: int, ho: int, wo: int, stride: int, dilation: int):
    return (slice(i * dilation, i * dilation + stride * (ho - 1) + 1, stride),
            slice(j * dilation, j * dilation + stride * (wo - 1) + 1, stride))


def _shift_ranges(offset: int, in_size: int, out_size: int):
    """Output range [lo, hi) and input start for out[o] += z[o + offset]."""
    lo = max(0, -offset)
    hi = min(out_size, in_size - offset)
    return lo, hi, lo + offset


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of NCHW ``x`` with OIkk ``weight``.

    Two equivalent GEMM formulations are used.  Input-side gathers a
    (pixels, k*k*C) patch matrix; output-side (stride 1 only) multiplies the
    input by all k*k tap matrices at once and shift-adds the (pixels, k*k*O)
    result.  The cheaper one is picked from the channel counts.
    """
    _check_4d(x, "conv2d input")
    _check_4d(weight, "conv2d weight")
    if int(stride) != stride or stride < 1:
        raise ConfigurationError(f"stride must be a positive int, got {stride}")
    if int(dilation) != dilation or dilation < 1:
        raise ConfigurationError(f"dilation must be a positive int, got {dilation}")
    if int(padding) != padding or padding < 0:
        raise ConfigurationError(f"padding must be a non-negative int, got {padding}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ConfigurationError(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if h + 2 * padding < dilation * (kh - 1) + 1 or w + 2 * padding < dilation * (kw - 1) + 1:
        raise ConfigurationError(
            f"conv2d: {h}x{w} input too small for kernel {kh}x{kw}, dilation {dilation}, padding {padding}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    dtype = np.result_type(x.data, weight.data)
    xh = x.data.transpose(0, 2, 3, 1)
    output_side = stride == 1 and kh * kw > 1 and o <= c

    if output_side:
        xh = np.ascontiguousarray(xh, dtype=dtype)
        wall = weight.data.transpose(1, 2, 3, 0).reshape(c, kh * kw * o)
        z = (xh.reshape(n * h * w, c) @ wall).reshape(n, h, w, kh, kw, o)
        out = np.zeros((n, ho, wo, o), dtype=dtype)
        for i in range(kh):
            ylo, yhi, ys = _shift_ranges(i * dilation - padding, h, ho)
            for j in range(kw):
                xlo, xhi, xs = _shift_ranges(j * dilation - padding, w, wo)
                if yhi > ylo and xhi > xlo:
                    out[:, ylo:yhi, xlo:xhi] += z[:, ys:ys + yhi - ylo, xs:xs + xhi - xlo, i, j]
        saved = xh
        out = out.reshape(n * ho * wo, o)
    else:
        if padding:
            xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=dtype)
            xp[:, padding:padding + h, padding:padding + w] = xh
        else:
            xp = xh
        cols = np.empty((n, ho, wo, kh, kw, c), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                si, sj = _tap_slices(i, j, ho, wo, stride, dilation)
                cols[:, :, :, i, j, :] = xp[:, si, sj, :]
        cols = cols.reshape(n * ho * wo, kh * kw * c)
        out = cols @ weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
        saved = cols
    if bias is not None:
        out += bias.data
    y = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    _record("conv2d", [x.shape, weight.shape], y.shape,
            stride=stride, padding=padding, dilation=dilation)

    parents = (x, weight) if bias is None else (x, weight, bias)
    if not (_grad_enabled and any(p.requires_grad for p in parents)):
        return Tensor(y)
    ctx = _ConvCtx(x.shape, weight.data, saved, stride, padding, dilation,
                   tuple(p.requires_grad for p in parents), output_side)
    return _result(y, parents, lambda g: _conv2d_backward(ctx, g))


def _conv2d_backward(ctx: _ConvCtx, g: np.ndarray):
    n, c, h, w = ctx.x_shape
    o, _, kh, kw = ctx.w.shape
    ho, wo = g.shape[2], g.shape[3]
    gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
    gmat = gh.reshape(n * ho * wo, o)
    need_x, need_w = ctx.need[0], ctx.need[1]
    gx = gw = gb = None
    if len(ctx.need) == 3 and ctx.need[2]:
        gb = gmat.sum(axis=0)

    if ctx.output_side:
        gz = np.zeros((n, h, w, kh, kw, o), dtype=gmat.dtype)
        for i in range(kh):
            ylo, yhi, ys = _shift_ranges(i * ctx.dilation - ctx.padding, h, ho)
            for j in range(kw):
                xlo, xhi, xs = _shift_ranges(j * ctx.dilation - ctx.padding, w, wo)
                if yhi > ylo and xhi > xlo:
                    gz[:, ys:ys + yhi - ylo, xs:xs + xhi - xlo, i, j] = gh[:, ylo:yhi, xlo:xhi]
        gz = gz.reshape(n * h * w, kh * kw * o)
        if need_w:
            gwall = ctx.saved.reshape(n * h * w, c).T @ gz
            gw = gwall.reshape(c, kh, kw, o).transpose(3, 0, 1, 2).copy()
        if need_x:
            wall = ctx.w.transpose(1, 2, 3, 0).reshape(c, kh * kw * o)
            gx = (gz @ wall.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    else:
        if need_w:
            gw = (ctx.saved.T @ gmat).reshape(kh, kw, c, o).transpose(3, 2, 0, 1).copy()
        if need_x:
            wmat = ctx.w.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
            gcols = (gmat @ wmat.T).reshape(n, ho, wo, kh, kw, c)
            p = ctx.padding
            gxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=gcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    si, sj = _tap_slices(i, j, ho, wo, ctx.stride, ctx.dilation)
                    gxp[:, si, sj, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2)
    grads = [gx, gw]
    if len(ctx.need) == 3:
        grads.append(gb)
    return grads


# ---------------------------------------------------------------- resampling

def maxpool2(x: Tensor) -> Tensor:
    """2x2/stride-2 max pooling in ceiling mode; ties go to the first row-major entry."""
    _check_4d(x, "maxpool2 input")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ConfigurationError(f"maxpool2 needs a non-empty map, got {x.shape}")
    ho, wo = -(-h // 2), -(-w // 2)
    if h % 2 or w % 2:
        xp = np.full((n, c, 2 * ho, 2 * wo), -np.inf, dtype=x.dtype)
        xp[:, :, :h, :w] = x.data
    else:
        xp = x.data
    win = xp.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    _record("maxpool2", [x.shape], y.shape)

    def backward(g):
        gw = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        return (gx[:, :, :h, :w],)

    return _result(y, (x,), backward)


def bilinear_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Row i holds the half-pixel-centre interpolation weights for output index i."""
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize (half-pixel centres, edge clamped) to ``out_h`` x ``out_w``."""
    _check_4d(x, "upsample input")
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"upsample target must be >= 1x1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        _record("upsample", [x.shape], x.shape)
        return _result(x.data, (x,), lambda g: (g,))
    ah = bilinear_matrix(h, out_h, x.dtype)
    aw = bilinear_matrix(w, out_w, x.dtype)
    # (N,C,H,W) x (W,ow) -> (N,C,H,ow); then contract H
    t = np.matmul(x.data, aw.T)
    y = np.matmul(ah, t)
    _record("upsample", [x.shape], y.shape)

    def backward(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return _result(y, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    return concat([a, b])


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Channel concatenation of NCHW tensors that agree on N, H and W."""
    for t in tensors:
        _check_4d(t, "concat input")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ConfigurationError(
                f"concat: N/H/W mismatch {tensors[0].shape} vs {t.shape}")
    widths = [t.shape[1] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(widths)])
    buf = np.empty((n, h, w, int(offsets[-1])), dtype=np.result_type(*[t.data for t in tensors]))
    for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
        buf[..., lo:hi] = t.data.transpose(0, 2, 3, 1)
    y = buf.transpose(0, 3, 1, 2)
    _record("concat", [t.shape for t in tensors], y.shape)
    return _result(y, tuple(tensors),
                   lambda g: tuple(g[:, lo:hi] for lo, hi in zip(offsets[:-1], offsets[1:])))


# ---------------------------------------------------------------- elementwise

def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    return _result(y, (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _result(y, (x,), lambda g: (g * y * (1 - y),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def tsum(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _result(np.asarray(x.data.sum(), dtype=dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "add":
        if b is None:
            raise ConfigurationError("add needs two operands")
        return add(a, b)
    raise ConfigurationError(f"unknown elementwise kind {kind!r}")


def stack_sum(terms: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors as one graph node."""
    data = terms[0].data.copy()
    for t in terms[1:]:
        data = data + t.data
    return _result(data, tuple(terms), lambda g: tuple(g for _ in terms))


# ---------------------------------------------------------------- batch norm

@dataclass
class BatchNormParams:
    """Per-channel affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
                   beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
                   running_mean=np.zeros(channels, dtype=dtype),
                   running_var=np.ones(channels, dtype=dtype))

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm2d(x: Tensor, params: BatchNormParams) -> Tensor:
    _check_4d(x, "batchnorm input")
    n, c, h, w = x.shape
    if c != params.channels:
        raise ConfigurationError(f"batchnorm: input has {c} channels, params have {params.channels}")
    gamma = params.gamma.data.reshape(1, c, 1, 1)
    beta = params.beta.data.reshape(1, c, 1, 1)
    count = n * h * w
    if params.training:
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        m = params.momentum
        unbiased = var * (count / (count - 1)) if count > 1 else var
        params.running_mean[...] = (1 - m) * params.running_mean + m * mean
        params.running_var[...] = (1 - m) * params.running_var + m * unbiased
    else:
        mean = params.running_mean
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = params.running_var
    inv = (1.0 / np.sqrt(var + params.eps)).astype(x.dtype).reshape(1, c, 1, 1)
    xhat = centered * inv
    y = xhat * gamma + beta
    _record("batchnorm", [x.shape], y.shape)
    training = params.training

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma
        if training:
            gx = inv / count * (count * gxhat
                                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv
        return gx, ggamma, gbeta

    return _result(y, (x, params.gamma, params.beta), backward)


# ---------------------------------------------------------------- loss

def bce_loss(pred: Tensor, target, reduction: str = "sum") -> Tensor:
    """Binary cross-entropy of probabilities against {0,1} targets.

    ``reduction="sum"`` is the plain pixel sum; ``"mean"`` divides it by the
    element count.  Probabilities are clamped to [1e-7, 1 - 1e-7] first.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise ConfigurationError(f"bce_loss: shape mismatch {pred.shape} vs {t.shape}")
    if reduction not in ("sum", "mean"):
        raise ConfigurationError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    dtype = pred.dtype
    t = t.astype(dtype, copy=False)
    p = np.clip(pred.data, BCE_CLAMP, 1 - BCE_CLAMP)
    total = -(t * np.log(p) + (1 - t) * np.log1p(-p)).sum()
    factor = 1.0 / t.size if reduction == "mean" else 1.0
    value = np.asarray(total / t.size if reduction == "mean" else total, dtype=dtype)

    def backward(g):
        inside = (pred.data > BCE_CLAMP) & (pred.data < 1 - BCE_CLAMP)
        d = (-(t / p) + (1 - t) / (1 - p)) * inside
        return (d * (g * factor),)

    return _result(value, (pred,), backward)
