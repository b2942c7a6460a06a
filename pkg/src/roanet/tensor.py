"""Minimal dense tensor engine with reverse-mode automatic differentiation.

Every operation the attention network needs is implemented here as a pure
function on :class:`Tensor` objects: convolution, bilinear sampling,
elementwise math, pooling/resizing, affine layers and batch normalization.
Each op records a closure that propagates gradients to its inputs; calling
``Tensor.backward()`` replays the recorded sequence in reverse.

Precision policy
----------------
float64 convolutions accumulate sequentially in (channel, ky, kx) order, so
they agree bit-for-bit with a naive direct-summation loop. float32 tensors
accumulate their matmul reductions in float64 by default (the result is then
a correctly rounded float32), which keeps single-precision outputs within a
rounding error of the exact sum. Training loops that prefer speed over that
guarantee can opt into plain float32 accumulation via
:func:`set_fast_accumulation` or the :func:`fast_accumulation` context
manager.
"""

import struct
from contextlib import contextmanager

import numpy as np

from roanet import _kernels


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes or channel counts."""


class EmptyOutput(ValueError):
    """A convolution's output would have a non-positive spatial extent."""


class IndivisibleExtent(ValueError):
    """A pooling stride does not divide the input extent."""


_FAST_ACCUMULATION = False


def set_fast_accumulation(enabled):
    """Let float32 matmul reductions accumulate in float32 instead of float64.

    Faster and still deterministic, but float32 outputs are no longer
    correctly rounded exact sums. Off by default; the training loop turns it
    on. float64 tensors are unaffected.
    """
    global _FAST_ACCUMULATION
    _FAST_ACCUMULATION = bool(enabled)


@contextmanager
def fast_accumulation(enabled=True):
    global _FAST_ACCUMULATION
    prev = _FAST_ACCUMULATION
    _FAST_ACCUMULATION = bool(enabled)
    try:
        yield
    finally:
        _FAST_ACCUMULATION = prev


class Tensor:
    """N-dimensional row-major array plus an optional gradient.

    ``data`` is always a float32 or float64 numpy array; non-float input is
    promoted to float64. Tensors produced by ops are treated as immutable.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def backward(self, grad=None):
        """Reverse-accumulate gradients from this tensor into its ancestry."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit seed needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeMismatch(f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")

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
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        _accumulate(self, grad)
        for node in reversed(topo):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    grad = grad.astype(tensor.data.dtype, copy=False)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad += grad


def _as_tensor(value, like):
    if isinstance(value, Tensor):
        if value.dtype != like.dtype:
            raise ShapeMismatch(f"mixed dtypes: {value.dtype} vs {like.dtype}")
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _unbroadcast(grad, shape):
    """Sum grad over the axes numpy broadcasting expanded, back to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(out_data, parents, grad_fn):
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b):
    b = _as_tensor(b, a)
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), grad_fn)


def sub(a, b):
    b = _as_tensor(b, a)
    try:
        out_data = a.data - b.data
    except ValueError as exc:
        raise ShapeMismatch(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), grad_fn)


def mul(a, b):
    b = _as_tensor(b, a)
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), grad_fn)


def scale(a, s):
    s = float(s)

    def grad_fn(g):
        _accumulate(a, g * s)

    return _make(a.data * s, (a,), grad_fn)


def relu(a):
    out_data = np.maximum(a.data, 0)

    def grad_fn(g):
        _accumulate(a, g * (a.data > 0))

    return _make(out_data, (a,), grad_fn)


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), grad_fn)


def absolute(a):
    # Subgradient 0 at exactly 0.
    def grad_fn(g):
        _accumulate(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), grad_fn)


def sum_all(a):
    def grad_fn(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype), (a,), grad_fn)


def mean_all(a):
    inv = 1.0 / a.size

    def grad_fn(g):
        _accumulate(a, np.broadcast_to(g * inv, a.shape))

    return _make(np.asarray(a.data.sum(dtype=np.float64) * inv, dtype=a.dtype), (a,), grad_fn)


def reshape(a, shape):
    shape = tuple(shape)

    def grad_fn(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), grad_fn)


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        _accumulate(a, g.transpose(inverse))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), grad_fn)


def concat(tensors, axis=1):
    tensors = list(tensors)
    base = tensors[0]
    for t in tensors[1:]:
        if t.dtype != base.dtype:
            raise ShapeMismatch("concat: mixed dtypes")
        for ax in range(base.ndim):
            if ax != axis and t.shape[ax] != base.shape[ax]:
                raise ShapeMismatch(f"concat: shapes {base.shape} and {t.shape} differ off-axis")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(out_data, tensors, grad_fn)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_out_extent(extent, k, stride, padding, dilation):
    return (extent + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(x, kh, kw, stride, padding, dilation):
    """(N, C*KH*KW, Ho*Wo) patch matrix; column order is (c, ky, kx)."""
    n, c, h, w = x.shape
    ho = _conv_out_extent(h, kh, stride, padding, dilation)
    wo = _conv_out_extent(w, kw, stride, padding, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        (n, c, kh, kw, ho, wo),
        (s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def _col2im(gcols, x_shape, kh, kw, stride, padding, dilation):
    """Adjoint of _im2col: scatter-add patch gradients back to image layout."""
    n, c, h, w = x_shape
    ho = _conv_out_extent(h, kh, stride, padding, dilation)
    wo = _conv_out_extent(w, kw, stride, padding, dilation)
    gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    g6 = gcols.reshape(n, c, kh, kw, ho, wo)
    for ky in range(kh):
        y0 = ky * dilation
        for kx in range(kw):
            x0 = kx * dilation
            gp[:, :, y0 : y0 + stride * ho : stride, x0 : x0 + stride * wo : stride] += g6[:, :, ky, kx]
    if padding:
        gp = gp[:, :, padding : padding + h, padding : padding + w]
    return gp


def _gemm(a, b):
    """Matmul that accumulates in float64 unless fast accumulation is on."""
    if a.dtype == np.float64 or _FAST_ACCUMULATION:
        return a @ b
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(a.dtype)


def _conv2d_forward_exact_f64(x, w, bias_data, stride, padding, dilation, ho, wo):
    """Sequential (c, ky, kx) accumulation; bit-identical to a naive loop."""
    n, c, _, _ = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.empty((n, o, ho, wo), dtype=np.float64)
    out[:] = bias_data.reshape(1, o, 1, 1)
    tmp = np.empty_like(out)
    for ci in range(c):
        for ky in range(kh):
            y0 = ky * dilation
            rows = xp[:, ci, y0 : y0 + stride * ho : stride]
            for kx in range(kw):
                x0 = kx * dilation
                sl = rows[:, :, x0 : x0 + stride * wo : stride]
                np.multiply(sl[:, None, :, :], w[None, :, ci, ky, kx, None, None], out=tmp)
                out += tmp
    return out


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """2D cross-correlation with zero padding.

    Args:
        x: input Tensor, shape (N, C, H, W).
        weight: Tensor of shape (O, C, KH, KW).
        bias: optional Tensor or sequence of O reals.
        stride, padding, dilation: usual conv hyperparameters (ints).

    float64 inputs take the order-exact accumulation path; float32 inputs go
    through im2col matmuls under the module's accumulation policy.
    """
    stride, padding, dilation = int(stride), int(padding), int(dilation)
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride/dilation must be >= 1 and padding >= 0")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch("conv2d: expected 4D input and weight")
    n, c, h, w_in = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeMismatch(f"conv2d: input has {c} channels but weight expects {ci}")
    ho = _conv_out_extent(h, kh, stride, padding, dilation)
    wo = _conv_out_extent(w_in, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise EmptyOutput(f"conv2d: output extent {ho}x{wo} for input {h}x{w_in}, kernel {kh}x{kw}")

    if bias is None:
        bias_t = None
        bias_data = np.zeros(o, dtype=x.dtype)
    else:
        bias_t = _as_tensor(bias, x)
        if bias_t.shape != (o,):
            raise ShapeMismatch(f"conv2d: bias has shape {bias_t.shape}, expected ({o},)")
        bias_data = bias_t.data

    if x.dtype == np.float64:
        out_data = _conv2d_forward_exact_f64(x.data, weight.data, bias_data, stride, padding, dilation, ho, wo)
    else:
        w2d = weight.data.reshape(o, c * kh * kw)
        out_data = np.empty((n, o, ho, wo), dtype=x.dtype)
        for i in range(n):  # per-sample keeps the f64 patch matrix small
            cols = _im2col(x.data[i : i + 1], kh, kw, stride, padding, dilation)[0]
            out_data[i] = _gemm(w2d, cols).reshape(o, ho, wo)
        out_data += bias_data.reshape(1, o, 1, 1)

    parents = [x, weight] if bias_t is None else [x, weight, bias_t]

    def grad_fn(g):
        g2 = g.reshape(n, o, ho * wo)
        if bias_t is not None:
            _accumulate(bias_t, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype))
        if weight.requires_grad:
            gw = np.zeros((o, c * kh * kw), dtype=np.float64)
            for i in range(n):
                cols = _im2col(x.data[i : i + 1], kh, kw, stride, padding, dilation)[0]
                gw += _gemm(g2[i], cols.T)
            _accumulate(weight, gw.reshape(weight.shape).astype(weight.dtype))
        if x.requires_grad:
            w2d_t = weight.data.reshape(o, c * kh * kw).T
            gx = np.empty((n, c, h, w_in), dtype=x.dtype)
            for i in range(n):
                gcols = _gemm(w2d_t, g2[i])
                gx[i] = _col2im(gcols[None], (1, c, h, w_in), kh, kw, stride, padding, dilation)[0]
            _accumulate(x, gx)

    return _make(out_data, parents, grad_fn)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


def bilinear_sample(x, points):
    """Sample every channel of x at fractional (y, x) coordinates.

    Args:
        x: Tensor of shape (N, C, H, W).
        points: Tensor of shape (N, ..., 2) holding (y, x) pairs; coordinates
            may fall outside the image, where pixels count as zero.

    Returns:
        Tensor of shape (N, C, ...) with the interpolated values. Gradients
        flow to both the image values and the coordinates.
    """
    if x.ndim != 4:
        raise ShapeMismatch("bilinear_sample: input must be (N, C, H, W)")
    if points.shape[0] != x.shape[0] or points.shape[-1] != 2:
        raise ShapeMismatch(f"bilinear_sample: points shape {points.shape} does not match batch {x.shape[0]} or pair layout")
    if points.dtype != x.dtype:
        raise ShapeMismatch(f"mixed dtypes: {points.dtype} vs {x.dtype}")

    n, c = x.shape[0], x.shape[1]
    mid_shape = points.shape[1:-1]
    p = int(np.prod(mid_shape, dtype=np.int64)) if mid_shape else 1
    pts = points.data.reshape(n, p, 2)
    ys = np.ascontiguousarray(pts[:, :, 0])
    xs = np.ascontiguousarray(pts[:, :, 1])

    out_data = _kernels.gather(x.data, ys, xs).reshape((n, c) + mid_shape)

    def grad_fn(g):
        g3 = np.ascontiguousarray(g.reshape(n, c, p))
        if x.requires_grad:
            _accumulate(x, _kernels.scatter(x.shape, g3, ys, xs, x.data.dtype))
        if points.requires_grad:
            gy, gx = _kernels.coord_grad(x.data, g3, ys, xs)
            _accumulate(points, np.stack([gy, gx], axis=-1).reshape(points.shape))

    return _make(out_data, (x, points), grad_fn)


# ---------------------------------------------------------------------------
# pooling and resizing
# ---------------------------------------------------------------------------


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C, 1, 1) spatial means."""
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)
    out_data = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)

    def grad_fn(g):
        _accumulate(x, np.broadcast_to(g * inv, x.shape))

    return _make(out_data, (x,), grad_fn)


def avg_downsample(x, stride):
    """Non-overlapping block means; H and W must be divisible by stride."""
    stride = int(stride)
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise IndivisibleExtent(f"avg_downsample: {h}x{w} not divisible by stride {stride}")
    ho, wo = h // stride, w // stride
    out_data = (
        x.data.reshape(n, c, ho, stride, wo, stride).mean(axis=(3, 5), dtype=np.float64).astype(x.dtype)
    )
    inv = 1.0 / (stride * stride)

    def grad_fn(g):
        gx = np.broadcast_to((g * inv)[:, :, :, None, :, None], (n, c, ho, stride, wo, stride))
        _accumulate(x, gx.reshape(n, c, h, w))

    return _make(out_data, (x,), grad_fn)


def _upsample_matrix(extent, factor, dtype):
    """Row-interpolation matrix for align-corners-false bilinear upsampling."""
    out_extent = extent * factor
    src = (np.arange(out_extent, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, extent - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, extent - 2) if extent > 1 else i0
    t = src - i0
    m = np.zeros((out_extent, extent), dtype=np.float64)
    rows = np.arange(out_extent)
    m[rows, i0] = 1.0 - t
    m[rows, np.minimum(i0 + 1, extent - 1)] += t
    return m.astype(dtype)


def bilinear_upsample(x, factor):
    """Enlarge H and W by an integer factor with align-corners-false bilinear weights."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("bilinear_upsample: factor must be >= 1")
    n, c, h, w = x.shape
    my = _upsample_matrix(h, factor, x.dtype)
    mx = _upsample_matrix(w, factor, x.dtype)
    out_data = np.matmul(np.matmul(my, x.data), mx.T)

    def grad_fn(g):
        _accumulate(x, np.matmul(np.matmul(my.T, g), mx))

    return _make(out_data, (x,), grad_fn)


# ---------------------------------------------------------------------------
# affine layer and batch norm
# ---------------------------------------------------------------------------


def fully_connected(x, weight, bias=None):
    """Affine map (N, C) @ (D, C)^T + bias -> (N, D)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeMismatch("fully_connected: expected 2D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"fully_connected: inner dims disagree ({x.shape[1]} vs {weight.shape[1]})")
    bias_t = None if bias is None else _as_tensor(bias, x)
    if bias_t is not None and bias_t.shape != (weight.shape[0],):
        raise ShapeMismatch(f"fully_connected: bias shape {bias_t.shape} != ({weight.shape[0]},)")

    out_data = _gemm(x.data, weight.data.T)
    if bias_t is not None:
        out_data = out_data + bias_t.data

    parents = [x, weight] if bias_t is None else [x, weight, bias_t]

    def grad_fn(g):
        if x.requires_grad:
            _accumulate(x, _gemm(g, weight.data))
        if weight.requires_grad:
            _accumulate(weight, _gemm(g.T, x.data))
        if bias_t is not None:
            _accumulate(bias_t, g.sum(axis=0))

    return _make(out_data, parents, grad_fn)


class BatchNormParams:
    """Learnable scale/shift plus running statistics for one channel axis."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = float(eps)
        self.momentum = float(momentum)

    @property
    def channels(self):
        return self.gamma.shape[0]


def batch_norm(x, params, mode="train"):
    """Channel-wise batch normalization over an NCHW tensor.

    ``train`` normalizes with batch statistics (biased variance) and updates
    the running stats in place; ``eval`` uses the running stats; ``identity``
    returns the input untouched, which is what the gradient checker wants.
    """
    if mode == "identity":
        return x
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    n, c, h, w = x.shape
    if params.channels != c:
        raise ShapeMismatch(f"batch_norm: {params.channels} params for {c} channels")
    gamma, beta = params.gamma, params.beta
    eps = params.eps
    reduce_axes = (0, 2, 3)

    if mode == "train":
        mean = x.data.mean(axis=reduce_axes, dtype=np.float64)
        var = x.data.var(axis=reduce_axes, dtype=np.float64)
        params.running_mean += params.momentum * (mean.astype(params.running_mean.dtype) - params.running_mean)
        params.running_var += params.momentum * (var.astype(params.running_var.dtype) - params.running_var)
    else:
        mean = params.running_mean.astype(np.float64)
        var = params.running_var.astype(np.float64)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    mean = mean.astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def grad_fn(g):
        _accumulate(beta, g.sum(axis=reduce_axes))
        _accumulate(gamma, (g * xhat).sum(axis=reduce_axes))
        if not x.requires_grad:
            return
        gs = g * gamma.data[None, :, None, None]
        if mode == "eval":
            _accumulate(x, gs * inv_std[None, :, None, None])
            return
        mean_gs = gs.mean(axis=reduce_axes, keepdims=True)
        mean_gs_xhat = (gs * xhat).mean(axis=reduce_axes, keepdims=True)
        _accumulate(x, inv_std[None, :, None, None] * (gs - mean_gs - xhat * mean_gs_xhat))

    return _make(out_data, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(fn, wrt, eps=1e-5, max_entries_per_input=None, rng=None):
    """Compare analytic gradients of ``sum(fn())`` against central differences.

    Args:
        fn: nullary closure rebuilding the forward pass from the tensors in
            ``wrt`` (their ``.data`` is perturbed in place for the numeric
            side).
        wrt: tensors to differentiate with respect to; must be float64 and
            have requires_grad set.
        eps: central-difference step.
        max_entries_per_input: if set, check only this many deterministically
            sampled entries per tensor (for large parameter sets).

    Returns:
        Worst relative error |analytic - numeric| / max(|analytic|, |numeric|, 1)
        over all checked entries.
    """
    wrt = list(wrt)
    for t in wrt:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 tensors")
        if not t.requires_grad:
            raise ValueError("grad_check targets must have requires_grad=True")
        t.zero_grad()

    out = fn()
    out.backward(np.ones_like(out.data))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for t, a in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        if max_entries_per_input is not None and flat.size > max_entries_per_input:
            entries = rng.choice(flat.size, size=max_entries_per_input, replace=False)
        else:
            entries = range(flat.size)
        aflat = a.reshape(-1)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn().data.sum(dtype=np.float64))
            flat[i] = orig - eps
            f_minus = float(fn().data.sum(dtype=np.float64))
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# tensor file format
# ---------------------------------------------------------------------------

_MAGIC = b"ROAT"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_tensor(path, tensor):
    """Write a tensor: magic "ROAT", u8 dtype code, u8 rank, LE u32 extents, LE payload."""
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if data.dtype not in _CODE_FOR:
        data = data.astype(np.float64)
    code = _CODE_FOR[data.dtype]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BB", code, data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(np.ascontiguousarray(data, dtype=_DTYPE_CODES[code]).tobytes())


def load_tensor(path):
    """Read a tensor written by save_tensor; returns a constant Tensor."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a tensor file (bad magic {blob[:4]!r})")
    code, rank = struct.unpack("<BB", blob[4:6])
    if code not in _DTYPE_CODES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    extents = struct.unpack(f"<{rank}I", blob[6 : 6 + 4 * rank])
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(extents, dtype=np.int64)) if rank else 1
    payload = blob[6 + 4 * rank :]
    if len(payload) != expected * dtype.itemsize:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, expected {expected * dtype.itemsize}")
    data = np.frombuffer(payload, dtype=dtype).reshape(extents)
    return Tensor(data.astype(dtype.newbyteorder("=")))
