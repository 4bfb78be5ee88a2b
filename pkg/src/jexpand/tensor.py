"""Dense float32 tensors with reverse-mode autodiff on a dynamically recorded tape.

Covers exactly the operator set the translation networks need: elementwise
algebra, activations, channel concat / batch selection, spatial pad/crop,
2D (transposed) convolution and instance/batch normalization. The graph is
freed after each backward pass, so memory stays bounded per training step.
All storage and accumulation is float32 with sequential reduction order;
with a fixed seed and single-threaded BLAS, replays are bit-identical.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "RunningStats",
    "UninitializedStatsError",
    "no_grad",
    "add", "sub", "mul", "square", "sqrt", "absolute", "mean", "tsum",
    "relu", "leaky_relu", "tanh", "softplus",
    "concat", "index_select", "pad2d", "crop2d",
    "conv2d", "conv_transpose2d", "instance_norm", "batch_norm",
]

# Flag NaN/Inf after every op (creation always rejects them). Costs one pass
# per op, so it is opt-in.
DEBUG_CHECKS = bool(int(os.environ.get("JEXPAND_DEBUG", "0")))

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending axes."""


class UninitializedStatsError(RuntimeError):
    """batch_norm was asked for eval-mode statistics before any training update."""


class no_grad:
    """Context manager that suspends tape recording (inference / metrics)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {where}")


class Tensor:
    """N-dimensional float32 array, optionally tracked by the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float32)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        """The underlying array (not a copy; treat as read-only)."""
        return self.data

    def detach(self):
        """Same data, cut from the tape."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Reverse-mode sweep from this tensor; frees the graph afterwards.

        ``seed`` defaults to ones (i.e. d(self)/d(self)); leaf tensors with
        ``requires_grad`` keep their accumulated ``.grad``, everything else
        is released.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float32)
            if seed.shape != self.data.shape:
                raise ShapeError(
                    f"backward seed shape {seed.shape} != tensor shape {self.data.shape}")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = seed
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
        # free the tape; keep grads only on leaves
        for node in topo:
            node._backward = None
            node._prev = ()
            if node is not self and node._is_interior():
                node.grad = None

    def _is_interior(self):
        # called after _prev was cleared, so record leaf-ness via requires_grad
        # plus absence of an accumulation target: interior nodes are exactly
        # those created by ops. Ops mark themselves via _op_created.
        return getattr(self, "_op_created", False)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


# Interior nodes are tagged so backward() can drop their grad buffers;
# __slots__ on Tensor keeps the per-node footprint small.
class _OpTensor(Tensor):
    __slots__ = ("_op_created",)


def _make(data, parents, backward):
    """Wrap an op result; records the tape only where gradients can flow."""
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    t = _OpTensor.__new__(_OpTensor)
    t.data = data
    t.grad = None
    t.requires_grad = req
    t._op_created = True
    if req:
        t._prev = tuple(p for p in parents if p.requires_grad)
        t._backward = backward
    else:
        t._prev = ()
        t._backward = None
    if DEBUG_CHECKS:
        _check_finite(data, "op result")
    return t


def _accum(t, g):
    # rebinding (never +=) keeps aliased buffers safe to share between edges
    t.grad = g if t.grad is None else t.grad + g


def _as_tensor(x):
    return x if isinstance(x, Tensor) else None


def _binary_shapes(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ "
            "(only identical shapes or tensor-scalar combinations broadcast)")


# -- elementwise algebra -----------------------------------------------------

def add(a, b):
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta is None:
        ta, tb = tb, None
        a, b = b, a
    if tb is None:
        s = np.float32(b)
        out_data = ta.data + s

        def _bw(g):
            if ta.requires_grad:
                _accum(ta, g)
        return _make(out_data, (ta,), _bw)

    _binary_shapes(ta, tb, "add")
    out_data = ta.data + tb.data

    def _bw(g):
        if ta.requires_grad:
            _accum(ta, g)
        if tb.requires_grad:
            _accum(tb, g)
    return _make(out_data, (ta, tb), _bw)


def sub(a, b):
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta is not None and tb is not None:
        _binary_shapes(ta, tb, "sub")
        out_data = ta.data - tb.data

        def _bw(g):
            if ta.requires_grad:
                _accum(ta, g)
            if tb.requires_grad:
                _accum(tb, -g)
        return _make(out_data, (ta, tb), _bw)
    if ta is not None:  # tensor - scalar
        out_data = ta.data - np.float32(b)

        def _bw(g):
            if ta.requires_grad:
                _accum(ta, g)
        return _make(out_data, (ta,), _bw)
    # scalar - tensor
    out_data = np.float32(a) - tb.data

    def _bw(g):
        if tb.requires_grad:
            _accum(tb, -g)
    return _make(out_data, (tb,), _bw)


def mul(a, b):
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta is None:
        ta, tb = tb, None
        a, b = b, a
    if tb is None:
        s = np.float32(b)
        out_data = ta.data * s

        def _bw(g):
            if ta.requires_grad:
                _accum(ta, g * s)
        return _make(out_data, (ta,), _bw)

    _binary_shapes(ta, tb, "mul")
    out_data = ta.data * tb.data

    def _bw(g):
        if ta.requires_grad:
            _accum(ta, g * tb.data)
        if tb.requires_grad:
            _accum(tb, g * ta.data)
    return _make(out_data, (ta, tb), _bw)


def square(t):
    out_data = t.data * t.data

    def _bw(g):
        if t.requires_grad:
            _accum(t, g * (2.0 * t.data))
    return _make(out_data, (t,), _bw)


def sqrt(t):
    out_data = np.sqrt(t.data)

    def _bw(g):
        if t.requires_grad:
            _accum(t, g * (0.5 / out_data))
    return _make(out_data, (t,), _bw)


def absolute(t):
    out_data = np.abs(t.data)

    def _bw(g):
        if t.requires_grad:
            _accum(t, g * np.sign(t.data))
    return _make(out_data, (t,), _bw)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def mean(t, axis=None, keepdims=False):
    axes = _norm_axes(axis, t.data.ndim)
    out_data = t.data.mean(axis=axes, keepdims=keepdims, dtype=np.float32)
    count = np.float32(np.prod([t.data.shape[a] for a in axes], dtype=np.int64))

    def _bw(g):
        if t.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axes)
            _accum(t, np.broadcast_to(gg / count, t.data.shape))
    return _make(np.asarray(out_data, dtype=np.float32), (t,), _bw)


def tsum(t, axis=None, keepdims=False):
    axes = _norm_axes(axis, t.data.ndim)
    out_data = t.data.sum(axis=axes, keepdims=keepdims, dtype=np.float32)

    def _bw(g):
        if t.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axes)
            _accum(t, np.broadcast_to(gg, t.data.shape))
    return _make(np.asarray(out_data, dtype=np.float32), (t,), _bw)


# -- activations -------------------------------------------------------------

def relu(t):
    out_data = np.maximum(t.data, 0.0)

    def _bw(g):
        if t.requires_grad:
            _accum(t, g * (t.data > 0.0))
    return _make(out_data, (t,), _bw)


def leaky_relu(t, slope=0.2):
    s = np.float32(slope)
    out_data = np.where(t.data > 0.0, t.data, t.data * s)

    def _bw(g):
        if t.requires_grad:
            # derivative at the kink itself pinned to 0 for determinism
            d = np.where(t.data > 0.0, np.float32(1.0),
                         np.where(t.data < 0.0, s, np.float32(0.0)))
            _accum(t, g * d)
    return _make(np.asarray(out_data, dtype=np.float32), (t,), _bw)


def tanh(t):
    out_data = np.tanh(t.data)

    def _bw(g):
        if t.requires_grad:
            _accum(t, g * (1.0 - out_data * out_data))
    return _make(out_data, (t,), _bw)


def softplus(t):
    """log(1 + e^x), evaluated stably; finite value and gradient at |x| ~ 1e4."""
    out_data = np.logaddexp(np.float32(0.0), t.data).astype(np.float32)

    def _bw(g):
        if t.requires_grad:
            sig = 0.5 * (1.0 + np.tanh(0.5 * t.data))
            _accum(t, g * sig.astype(np.float32))
    return _make(out_data, (t,), _bw)


# -- shape plumbing ----------------------------------------------------------

def concat(tensors, axis=1):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of empty sequence")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(
                f"concat: shape {s} incompatible with {ref} outside axis {axis}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                _accum(t, p)
    return _make(out_data, tuple(tensors), _bw)


def index_select(t, indices, axis=0):
    """Gather rows along ``axis``; gradient scatter-adds back (DRS batch picks)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("index_select expects a 1-D index list")
    out_data = np.take(t.data, idx, axis=axis)

    def _bw(g):
        if t.requires_grad:
            buf = np.zeros_like(t.data)
            np.add.at(buf, tuple(idx if a == axis else slice(None)
                                 for a in range(t.data.ndim)), g)
            _accum(t, buf)
    return _make(out_data, (t,), _bw)


def pad2d(t, pads, value=0.0):
    """Constant-pad the trailing two axes; ``pads`` = (top, bottom, left, right)."""
    top, bottom, left, right = (int(p) for p in pads)
    if min(top, bottom, left, right) < 0:
        raise ValueError("pad2d: negative pad")
    width = [(0, 0)] * (t.data.ndim - 2) + [(top, bottom), (left, right)]
    out_data = np.pad(t.data, width, constant_values=np.float32(value))
    H, W = t.data.shape[-2:]

    def _bw(g):
        if t.requires_grad:
            sl = (Ellipsis, slice(top, top + H), slice(left, left + W))
            _accum(t, g[sl])
    return _make(out_data, (t,), _bw)


def crop2d(t, offset, size):
    """Slice the trailing two axes: ``offset`` = (row, col), ``size`` = (H, W)."""
    r, c = (int(v) for v in offset)
    h, w = (int(v) for v in size)
    H, W = t.data.shape[-2:]
    if r < 0 or c < 0 or r + h > H or c + w > W:
        raise ShapeError(f"crop2d: window {offset}+{size} outside {(H, W)}")
    sl = (Ellipsis, slice(r, r + h), slice(c, c + w))
    out_data = t.data[sl].copy()

    def _bw(g):
        if t.requires_grad:
            buf = np.zeros_like(t.data)
            buf[sl] = g
            _accum(t, buf)
    return _make(out_data, (t,), _bw)


# -- convolution kernels (internal NHWC layout) -------------------------------
#
# Channel-last keeps the per-offset slice copies contiguous in C, which is
# what BLAS wants. Inputs with few channels instead take an im2col buffer and
# a single GEMM, because 16 outer-product GEMMs on a 1..8 column operand are
# memory-bound. Threshold picked from benchmarks on a 1-core host.

_IM2COL_MAX_C = 8


def _gather_mm(xp, wh, stride, Ho, Wo):
    # xp: (N, Hp, Wp, C) padded activation, wh: (kH, kW, C, F) -> (N*Ho*Wo, F)
    N, _, _, C = xp.shape
    kH, kW, _, F = wh.shape
    if C <= _IM2COL_MAX_C:
        col = np.empty((N, Ho, Wo, kH * kW * C), np.float32)
        k = 0
        for di in range(kH):
            for dj in range(kW):
                col[..., k:k + C] = xp[:, di:di + stride * Ho:stride,
                                       dj:dj + stride * Wo:stride, :]
                k += C
        return col.reshape(N * Ho * Wo, kH * kW * C) @ wh.reshape(kH * kW * C, F)
    out = np.zeros((N * Ho * Wo, F), np.float32)
    for di in range(kH):
        for dj in range(kW):
            sl = np.ascontiguousarray(
                xp[:, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride, :])
            out += sl.reshape(N * Ho * Wo, C) @ wh[di, dj]
    return out


def _scatter_mm(y, wh, stride, Ho, Wo, out_shape):
    # exact adjoint of _gather_mm: y (N*Ho*Wo, F) -> (N, Hp, Wp, C)
    N, _, _, C = out_shape
    kH, kW, _, F = wh.shape
    xp = np.zeros(out_shape, np.float32)
    if C <= _IM2COL_MAX_C:
        dcol = (y @ wh.reshape(kH * kW * C, F).T).reshape(N, Ho, Wo, kH * kW * C)
        k = 0
        for di in range(kH):
            for dj in range(kW):
                xp[:, di:di + stride * Ho:stride,
                   dj:dj + stride * Wo:stride, :] += dcol[..., k:k + C]
                k += C
        return xp
    for di in range(kH):
        for dj in range(kW):
            xp[:, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride, :] += \
                (y @ wh[di, dj].T).reshape(N, Ho, Wo, C)
    return xp


def _weight_grad_mm(xp, y, stride, Ho, Wo, kH, kW):
    # dwh[di, dj] = slice(xp).T @ y, shapes (C, F) per kernel offset
    N, _, _, C = xp.shape
    F = y.shape[1]
    dwh = np.empty((kH, kW, C, F), np.float32)
    for di in range(kH):
        for dj in range(kW):
            sl = np.ascontiguousarray(
                xp[:, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride, :])
            dwh[di, dj] = sl.reshape(N * Ho * Wo, C).T @ y
    return dwh


def _to_nhwc(a):
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _to_nchw(a):
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Strided 2D cross-correlation.

    ``x``: (N, C, H, W), ``weight``: (F, C, kH, kW), ``bias``: (F,) or None.
    Output extent is floor((H + 2*pad - kH)/stride) + 1 per spatial axis.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4-D input/weight, got {x.data.shape} / {weight.data.shape}")
    N, C, H, W = x.data.shape
    F, Cw, kH, kW = weight.data.shape
    if C != Cw:
        raise ShapeError(
            f"conv2d: input channels {C} (input axis 1) != weight channels {Cw} (weight axis 1)")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if pad < 0:
        raise ValueError("conv2d: pad must be >= 0")
    if kH > H + 2 * pad or kW > W + 2 * pad:
        raise ShapeError(
            f"conv2d: kernel ({kH},{kW}) exceeds padded input ({H + 2 * pad},{W + 2 * pad})")
    if bias is not None and bias.data.shape != (F,):
        raise ShapeError(
            f"conv2d: bias shape {bias.data.shape} != ({F},) (weight axis 0)")

    Ho = (H + 2 * pad - kH) // stride + 1
    Wo = (W + 2 * pad - kW) // stride + 1
    xp = np.pad(_to_nhwc(x.data), ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    wh = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # (kH,kW,C,F)
    y = _gather_mm(xp, wh, stride, Ho, Wo)
    if bias is not None:
        y = y + bias.data
    out_data = _to_nchw(y.reshape(N, Ho, Wo, F))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        gh = _to_nhwc(g).reshape(N * Ho * Wo, F)
        if x.requires_grad:
            dxp = _scatter_mm(gh, wh, stride, Ho, Wo, xp.shape)
            dx = dxp[:, pad:pad + H, pad:pad + W, :]
            _accum(x, _to_nchw(dx))
        if weight.requires_grad:
            dwh = _weight_grad_mm(xp, gh, stride, Ho, Wo, kH, kW)
            _accum(weight, np.ascontiguousarray(dwh.transpose(3, 2, 0, 1)))
        if bias is not None and bias.requires_grad:
            _accum(bias, gh.sum(axis=0, dtype=np.float32))
    return _make(out_data, parents, _bw)


def conv_transpose2d(x, weight, bias=None, stride=1, pad=0):
    """Adjoint of :func:`conv2d` with matched stride/pad (decoder upsampling).

    ``x``: (N, F, H, W), ``weight``: (F, C, kH, kW) as in the paired conv2d;
    output is (N, C, (H-1)*stride - 2*pad + kH, ...).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv_transpose2d: expected 4-D input/weight, got {x.data.shape} / {weight.data.shape}")
    N, Fi, H, W = x.data.shape
    F, C, kH, kW = weight.data.shape
    if Fi != F:
        raise ShapeError(
            f"conv_transpose2d: input channels {Fi} (input axis 1) != weight axis 0 ({F})")
    if stride < 1:
        raise ValueError("conv_transpose2d: stride must be >= 1")
    Hf = (H - 1) * stride + kH
    Wf = (W - 1) * stride + kW
    Ho = Hf - 2 * pad
    Wo = Wf - 2 * pad
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv_transpose2d: output extent ({Ho},{Wo}) not positive")
    if bias is not None and bias.data.shape != (C,):
        raise ShapeError(
            f"conv_transpose2d: bias shape {bias.data.shape} != ({C},) (weight axis 1)")

    xh = _to_nhwc(x.data).reshape(N * H * W, F)
    wh = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # (kH,kW,C,F)
    full = _scatter_mm(xh, wh, stride, H, W, (N, Hf, Wf, C))
    out = full[:, pad:pad + Ho, pad:pad + Wo, :]
    if bias is not None:
        out = out + bias.data
    out_data = _to_nchw(out)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        gh = _to_nhwc(g)
        gp = np.pad(gh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        if x.requires_grad:
            dx = _gather_mm(gp, wh, stride, H, W)
            _accum(x, _to_nchw(dx.reshape(N, H, W, F)))
        if weight.requires_grad:
            dwh = _weight_grad_mm(gp, xh, stride, H, W, kH, kW)
            _accum(weight, np.ascontiguousarray(dwh.transpose(3, 2, 0, 1)))
        if bias is not None and bias.requires_grad:
            _accum(bias, gh.reshape(-1, C).sum(axis=0, dtype=np.float32))
    return _make(out_data, parents, _bw)


# -- normalization -----------------------------------------------------------

def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-(sample, channel) spatial normalization with affine parameters.

    Statistics use the biased variance over H*W; gradients flow through them.
    """
    if eps <= 0.0:
        raise ValueError("instance_norm: eps must be > 0 (division guard)")
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm: expected (N,C,H,W), got {x.data.shape}")
    N, C, H, W = x.data.shape
    if H * W < 2:
        raise ShapeError("instance_norm: needs at least 2 spatial values per channel")
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(
            f"instance_norm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} != ({C},)")

    mu = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float32)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True, dtype=np.float32)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv
    gb = gamma.data[None, :, None, None]
    out_data = gb * xhat + beta.data[None, :, None, None]

    def _bw(g):
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3), dtype=np.float32))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3), dtype=np.float32))
        if x.requires_grad:
            dxhat = g * gb
            m1 = dxhat.mean(axis=(2, 3), keepdims=True, dtype=np.float32)
            m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True, dtype=np.float32)
            _accum(x, inv * (dxhat - m1 - xhat * m2))
    return _make(out_data.astype(np.float32), (x, gamma, beta), _bw)


class RunningStats:
    """Running mean/variance buffers for batch_norm's eval mode."""

    def __init__(self, channels, momentum=0.1):
        self.channels = int(channels)
        self.momentum = float(momentum)
        self.mean = np.zeros(self.channels, np.float32)
        self.var = np.ones(self.channels, np.float32)
        self.initialized = False

    def update(self, batch_mean, batch_var):
        if not self.initialized:
            self.mean = batch_mean.astype(np.float32)
            self.var = batch_var.astype(np.float32)
            self.initialized = True
        else:
            m = np.float32(self.momentum)
            self.mean = (1.0 - m) * self.mean + m * batch_mean
            self.var = (1.0 - m) * self.var + m * batch_var


def batch_norm(x, gamma, beta, running_stats, training, eps=1e-5):
    """Per-channel normalization over (N, H, W); running stats serve eval mode."""
    if eps <= 0.0:
        raise ValueError("batch_norm: eps must be > 0 (division guard)")
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: expected (N,C,H,W), got {x.data.shape}")
    N, C, H, W = x.data.shape
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(
            f"batch_norm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} != ({C},)")

    gb = gamma.data[None, :, None, None]
    if training:
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True, dtype=np.float32)
        xc = x.data - mu
        var = np.mean(xc * xc, axis=(0, 2, 3), keepdims=True, dtype=np.float32)
        if running_stats is not None:
            running_stats.update(mu.reshape(C), var.reshape(C))
        inv = 1.0 / np.sqrt(var + np.float32(eps))
        xhat = xc * inv
        out_data = gb * xhat + beta.data[None, :, None, None]

        def _bw(g):
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(0, 2, 3), dtype=np.float32))
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=(0, 2, 3), dtype=np.float32))
            if x.requires_grad:
                dxhat = g * gb
                m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True, dtype=np.float32)
                m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True, dtype=np.float32)
                _accum(x, inv * (dxhat - m1 - xhat * m2))
        return _make(out_data.astype(np.float32), (x, gamma, beta), _bw)

    if running_stats is None or not running_stats.initialized:
        raise UninitializedStatsError(
            "batch_norm eval mode requires at least one training-mode update")
    rm = running_stats.mean[None, :, None, None]
    rinv = 1.0 / np.sqrt(running_stats.var[None, :, None, None] + np.float32(eps))
    xhat = (x.data - rm) * rinv
    out_data = gb * xhat + beta.data[None, :, None, None]

    def _bw(g):
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3), dtype=np.float32))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3), dtype=np.float32))
        if x.requires_grad:
            _accum(x, g * (gb * rinv))
    return _make(out_data.astype(np.float32), (x, gamma, beta), _bw)
