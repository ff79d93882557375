"""Dense tensor engine with reverse-mode autodiff on top of numpy.

Every numeric operation in the package goes through the primitives here.
Float32 is the working precision; a float64 mode exists for finite-difference
gradient checking. Ops record a tape of closures; ``backward`` walks it in
reverse topological order and accumulates gradients on the leaves.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GraphCycleError",
    "tensor",
    "zeros",
    "ones",
    "precision",
    "default_dtype",
    "no_grad",
    "grad_enabled",
    "trace_allocations",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "sigmoid",
    "exp",
    "sqrt",
    "absolute",
    "clamp",
    "prelu",
    "softmax",
    "matmul",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "expand",
    "concat",
    "crop",
    "gather_pixels",
    "conv2d",
    "bilinear_warp",
    "bilinear_resize",
    "pixel_shuffle",
    "pixel_unshuffle",
    "pad_reflect2d",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes disagree with an op's contract."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class GraphCycleError(RuntimeError):
    """Raised if the recorded graph is cyclic (should never happen normally)."""


_state = threading.local()


def _dtype_stack():
    if not hasattr(_state, "dtypes"):
        _state.dtypes = [np.float32]
    return _state.dtypes


def default_dtype():
    return _dtype_stack()[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default leaf dtype ('float32' or 'float64')."""
    dt = np.dtype(dtype).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _dtype_stack().append(dt)
    try:
        yield
    finally:
        _dtype_stack().pop()


def _grad_flag():
    if not hasattr(_state, "grad_on"):
        _state.grad_on = True
    return _state.grad_on


@contextlib.contextmanager
def no_grad():
    old = _grad_flag()
    _state.grad_on = False
    try:
        yield
    finally:
        _state.grad_on = old


def grad_enabled():
    return _grad_flag()


# Optional allocation trace, used by the attention memory probe.
_alloc_trace = None


@contextlib.contextmanager
def trace_allocations():
    """Record (shape, nbytes) of every Tensor buffer created inside the block."""
    global _alloc_trace
    old = _alloc_trace
    _alloc_trace = []
    try:
        yield _alloc_trace
    finally:
        _alloc_trace = old


CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad=False, _prev=(), _backward=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = _prev
        self._backward = _backward
        self.name = None
        if CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        if _alloc_trace is not None:
            _alloc_trace.append((arr.shape, arr.nbytes))

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

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; the real work lives in the module-level functions.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)


def _make(data, prev, backward_fn):
    track = _grad_flag() and any(p.requires_grad for p in prev)
    if track:
        return Tensor(data, requires_grad=True, _prev=tuple(prev), _backward=backward_fn)
    return Tensor(data)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    _same_shape(a, b, "add")

    def bw(g, acc):
        acc(a, g)
        acc(b, g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    _same_shape(a, b, "sub")

    def bw(g, acc):
        acc(a, g)
        acc(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g, acc):
        acc(a, g * bd)
        acc(b, g * ad)

    return _make(ad * bd, (a, b), bw)


def neg(a):
    def bw(g, acc):
        acc(a, -g)

    return _make(-a.data, (a,), bw)


def scale(a, s):
    s = float(s)

    def bw(g, acc):
        acc(a, g * s)

    return _make(a.data * s, (a,), bw)


def add_scalar(a, s):
    s = float(s)

    def bw(g, acc):
        acc(a, g)

    return _make(a.data + s, (a,), bw)


def sigmoid(a):
    # Split by sign so neither branch exponentiates a large positive value.
    x = a.data
    pos = x >= 0
    e = np.exp(np.where(pos, -x, x))
    out = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g, acc):
        acc(a, g * out * (1.0 - out))

    return _make(out, (a,), bw)


def exp(a):
    out = np.exp(a.data)

    def bw(g, acc):
        acc(a, g * out)

    return _make(out, (a,), bw)


def sqrt(a):
    out = np.sqrt(a.data)

    def bw(g, acc):
        acc(a, g * (0.5 / out))

    return _make(out, (a,), bw)


def absolute(a):
    sgn = np.sign(a.data)

    def bw(g, acc):
        acc(a, g * sgn)

    return _make(np.abs(a.data), (a,), bw)


def clamp(a, lo, hi):
    lo, hi = float(lo), float(hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g, acc):
        acc(a, g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), bw)


def prelu(a, slope):
    """PReLU along the channel axis (axis 1) of an NC... tensor.

    slope is a Tensor of shape () or (C,).
    """
    sd = slope.data
    if sd.ndim == 0:
        srow = sd
    elif sd.ndim == 1:
        if a.ndim < 2 or a.shape[1] != sd.shape[0]:
            raise ShapeError(f"prelu: slope shape {sd.shape} vs input {a.shape}")
        srow = sd.reshape((1, -1) + (1,) * (a.ndim - 2))
    else:
        raise ShapeError("prelu: slope must be scalar or per-channel")
    pos = a.data >= 0
    out = np.where(pos, a.data, a.data * srow)

    def bw(g, acc):
        acc(a, np.where(pos, g, g * srow))
        gneg = np.where(pos, 0.0, g * a.data)
        if sd.ndim == 0:
            acc(slope, np.asarray(gneg.sum(), dtype=gneg.dtype))
        else:
            axes = (0,) + tuple(range(2, a.ndim))
            acc(slope, gneg.sum(axis=axes))

    return _make(out, (a, slope), bw)


def softmax(a, axis):
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for ndim {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, acc):
        dot = (g * out).sum(axis=axis, keepdims=True)
        acc(a, out * (g - dot))

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape

    def bw(g, acc):
        acc(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g, acc):
        acc(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def expand(a, axis, reps):
    """Insert a new axis of length `reps` by copying; backward sums over it."""
    out = np.repeat(np.expand_dims(a.data, axis), reps, axis=axis)

    def bw(g, acc):
        acc(a, g.sum(axis=axis))

    return _make(out, (a,), bw)


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, acc):
        if axis is None:
            acc(a, np.broadcast_to(g, a.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            acc(a, np.broadcast_to(g, a.shape).copy())

    return _make(out, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    nd = tensors[0].ndim
    for t in tensors:
        if t.ndim != nd:
            raise ShapeError("concat: rank mismatch")
    sizes = [t.shape[axis] for t in tensors]
    offs = np.cumsum([0] + sizes)

    def bw(g, acc):
        for t, o, s in zip(tensors, offs[:-1], sizes):
            sl = [slice(None)] * nd
            sl[axis] = slice(o, o + s)
            acc(t, np.ascontiguousarray(g[tuple(sl)]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def crop(a, slices):
    """Differentiable slicing; grads are zero-padded back to the input shape."""
    slices = tuple(slices)

    def bw(g, acc):
        ga = np.zeros(a.shape, dtype=g.dtype)
        ga[slices] = g
        acc(a, ga)

    return _make(np.ascontiguousarray(a.data[slices]), (a,), bw)


def gather_pixels(a, index):
    """Gather along a flattened view; backward scatter-adds via bincount."""
    flat = a.data.reshape(-1)
    out = flat[index]

    def bw(g, acc):
        ga = np.bincount(index.ravel(), weights=g.ravel(), minlength=flat.size)
        acc(a, ga.astype(g.dtype).reshape(a.shape))

    return _make(out, (a,), bw)


def pad_reflect2d(a, pads):
    """Reflect-pad the two trailing axes of an N...HW tensor.

    pads = (top, bottom, left, right). Backward folds the reflected border
    contributions back onto their source pixels.
    """
    t, b, l, r = pads
    H, W = a.shape[-2], a.shape[-1]
    pad_spec = [(0, 0)] * (a.ndim - 2) + [(t, b), (l, r)]
    out = np.pad(a.data, pad_spec, mode="reflect")
    # Index map from padded plane back to source plane, built once.
    src = np.arange(H * W, dtype=np.int64).reshape(H, W)
    idx = np.pad(src, [(t, b), (l, r)], mode="reflect")

    def bw(g, acc):
        lead = int(np.prod(a.shape[:-2], dtype=np.int64)) if a.ndim > 2 else 1
        g2 = g.reshape(lead, idx.shape[0] * idx.shape[1])
        plane = H * W
        comb = (np.arange(lead, dtype=np.int64)[:, None] * plane) + idx.ravel()[None, :]
        ga = np.bincount(comb.ravel(), weights=g2.ravel(), minlength=lead * plane)
        acc(a, ga.astype(g.dtype).reshape(a.shape))

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    """Batched matmul. Either both operands share leading batch dims, or b is 2-D."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-D")
    if bd.ndim == 2:
        if ad.shape[-1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dims {ad.shape[-1]} vs {bd.shape[0]}")
    else:
        if ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
            raise ShapeError(f"matmul: shape mismatch {ad.shape} vs {bd.shape}")
    out = np.matmul(ad, bd)

    def bw(g, acc):
        if bd.ndim == 2:
            acc(a, np.matmul(g, bd.T))
            gl = g.reshape(-1, g.shape[-1])
            al = ad.reshape(-1, ad.shape[-1])
            acc(b, np.matmul(al.T, gl))
        else:
            acc(a, np.matmul(g, bd.swapaxes(-1, -2)))
            acc(b, np.matmul(ad.swapaxes(-1, -2), g))

    return _make(out, (a, b), bw)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(n, k, stride, dilation, padding):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col_view(xp, KH, KW, Ho, Wo, stride, dilation):
    N, C = xp.shape[0], xp.shape[1]
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(N, C, KH, KW, Ho, Wo),
        strides=(s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
        writeable=False,
    )


def conv2d(x, w, bias=None, stride=1, dilation=1, padding=0, groups=1):
    """2-D cross-correlation on NCHW input, with stride/dilation/padding/groups.

    w has shape (out_ch, in_ch // groups, kh, kw). Differentiable w.r.t.
    x, w and bias.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (O,Cg,KH,KW), got {w.shape}")
    N, C, H, W = x.shape
    O, Cg, KH, KW = w.shape
    if stride < 1 or dilation < 1 or padding < 0 or groups < 1:
        raise ShapeError("conv2d: stride/dilation must be >=1, padding >=0")
    if C % groups != 0 or O % groups != 0:
        raise ShapeError(f"conv2d: channels ({C} in, {O} out) not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(f"conv2d: kernel expects {Cg} in-channels per group, input has {C // groups}")
    Ho = _conv_out_size(H, KH, stride, dilation, padding)
    Wo = _conv_out_size(W, KW, stride, dilation, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(
            f"conv2d: zero-size output for input {H}x{W}, kernel {KH}x{KW}, "
            f"stride {stride}, dilation {dilation}, padding {padding}"
        )
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")

    if stride == 1 and groups == 1:
        return _conv2d_gemm(x, w, bias, dilation, padding, Ho, Wo)

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    Og = O // groups

    def fwd_group(gi):
        xg = xp[:, gi * Cg : (gi + 1) * Cg]
        cols = _im2col_view(xg, KH, KW, Ho, Wo, stride, dilation)
        wg = w.data[gi * Og : (gi + 1) * Og]
        og = np.tensordot(cols, wg, axes=([1, 2, 3], [1, 2, 3]))  # (N,Ho,Wo,Og)
        return np.ascontiguousarray(og.transpose(0, 3, 1, 2))

    if groups == 1:
        out = fwd_group(0)
    else:
        out = np.concatenate([fwd_group(gi) for gi in range(groups)], axis=1)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)

    def bw(g, acc):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for gi in range(groups):
            xg = xp[:, gi * Cg : (gi + 1) * Cg]
            cols = _im2col_view(xg, KH, KW, Ho, Wo, stride, dilation)
            gg = g[:, gi * Og : (gi + 1) * Og]  # (N,Og,Ho,Wo)
            gw[gi * Og : (gi + 1) * Og] = np.tensordot(gg, cols, axes=([0, 2, 3], [0, 4, 5]))
            wg = w.data[gi * Og : (gi + 1) * Og]
            # (N,Ho,Wo,Cg,KH,KW)
            dcols = np.tensordot(gg, wg, axes=([1], [0]))
            dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # (N,Cg,KH,KW,Ho,Wo)
            sub = gxp[:, gi * Cg : (gi + 1) * Cg]
            for i in range(KH):
                for j in range(KW):
                    sub[
                        :,
                        :,
                        i * dilation : i * dilation + stride * Ho : stride,
                        j * dilation : j * dilation + stride * Wo : stride,
                    ] += dcols[:, :, i, j]
        acc(w, gw)
        if p:
            acc(x, np.ascontiguousarray(gxp[:, :, p : p + H, p : p + W]))
        else:
            acc(x, gxp)
        if bias is not None:
            acc(bias, g.sum(axis=(0, 2, 3)))

    prev = (x, w) if bias is None else (x, w, bias)
    return _make(out, prev, bw)


def _conv2d_gemm(x, w, bias, dilation, padding, Ho, Wo):
    """Stride-1 convolution as one channels-last GEMM over all padded positions
    plus per-tap shifted accumulation. Avoids materializing im2col buffers."""
    N, C, H, W = x.shape
    O, _, KH, KW = w.shape
    p, d = padding, dilation
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    Hp, Wp = H + 2 * p, W + 2 * p
    xpT = np.ascontiguousarray(xp.transpose(0, 2, 3, 1)).reshape(N * Hp * Wp, C)
    w2 = np.ascontiguousarray(w.data.transpose(1, 2, 3, 0)).reshape(C, KH * KW * O)
    z = (xpT @ w2).reshape(N, Hp, Wp, KH, KW, O)
    out_nhwc = np.zeros((N, Ho, Wo, O), dtype=x.dtype)
    for i in range(KH):
        for j in range(KW):
            out_nhwc += z[:, i * d : i * d + Ho, j * d : j * d + Wo, i, j, :]
    del z
    out = np.ascontiguousarray(out_nhwc.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    def bw(g, acc):
        g_nhwc = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g2 = np.zeros((N, Hp, Wp, KH, KW, O), dtype=g.dtype)
        for i in range(KH):
            for j in range(KW):
                g2[:, i * d : i * d + Ho, j * d : j * d + Wo, i, j, :] = g_nhwc
        g2f = g2.reshape(N * Hp * Wp, KH * KW * O)
        gw = (xpT.T @ g2f).reshape(C, KH, KW, O)
        acc(w, np.ascontiguousarray(gw.transpose(3, 0, 1, 2)))
        gxp = (g2f @ w2.T).reshape(N, Hp, Wp, C).transpose(0, 3, 1, 2)
        if p:
            gxp = gxp[:, :, p : p + H, p : p + W]
        acc(x, np.ascontiguousarray(gxp))
        if bias is not None:
            acc(bias, g.sum(axis=(0, 2, 3)))

    prev = (x, w) if bias is None else (x, w, bias)
    return _make(out, prev, bw)


# ---------------------------------------------------------------------------
# bilinear sampling (warp / resize)


def _bilinear_core(img_data, xs, ys):
    """Shared sampling machinery, channels-last internally.

    xs, ys: absolute sample coordinates, shape (N, P). Returns the sampled
    values as (N, P, C) plus the context backward needs.
    """
    N, C, H, W = img_data.shape
    xc = np.clip(xs, 0.0, W - 1.0)
    yc = np.clip(ys, 0.0, H - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(H - 2, 0))
    fx = (xc - x0).astype(img_data.dtype)
    fy = (yc - y0).astype(img_data.dtype)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    imgT = np.ascontiguousarray(img_data.transpose(0, 2, 3, 1)).reshape(N * H * W, C)
    base = (np.arange(N, dtype=np.int64) * (H * W))[:, None]
    idx00 = y0 * W + x0
    idx01 = y0 * W + x1
    idx10 = y1 * W + x0
    idx11 = y1 * W + x1

    def take(idx):
        return imgT[(base + idx).ravel()].reshape(N, idx.shape[1], C)

    v00, v01, v10, v11 = take(idx00), take(idx01), take(idx10), take(idx11)
    w00 = ((1 - fy) * (1 - fx))[:, :, None]
    w01 = ((1 - fy) * fx)[:, :, None]
    w10 = (fy * (1 - fx))[:, :, None]
    w11 = (fy * fx)[:, :, None]
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11
    ctx = dict(
        N=N, C=C, H=H, W=W,
        fx=fx, fy=fy,
        idx=(idx00, idx01, idx10, idx11),
        vals=(v00, v01, v10, v11),
        in_x=((xs > 0.0) & (xs < W - 1.0)).astype(img_data.dtype),
        in_y=((ys > 0.0) & (ys < H - 1.0)).astype(img_data.dtype),
    )
    return out, ctx


def _bilinear_img_grad(g, ctx, dtype):
    """g: (N, P, C) upstream gradient; returns (N, C, H, W)."""
    N, C, H, W = ctx["N"], ctx["C"], ctx["H"], ctx["W"]
    fx, fy = ctx["fx"], ctx["fy"]
    HW = H * W
    corners = zip(
        ctx["idx"],
        (
            ((1 - fy) * (1 - fx))[:, :, None],
            ((1 - fy) * fx)[:, :, None],
            (fy * (1 - fx))[:, :, None],
            (fy * fx)[:, :, None],
        ),
    )
    base = (np.arange(N, dtype=np.int64) * HW)[:, None]
    gT = np.zeros((N * HW, C), dtype=dtype)
    for idx, wgt in corners:
        comb = (base + idx).ravel()
        contrib = g * wgt
        for c in range(C):
            gT[:, c] += np.bincount(comb, weights=contrib[:, :, c].ravel(),
                                    minlength=N * HW).astype(dtype)
    return np.ascontiguousarray(gT.reshape(N, H, W, C).transpose(0, 3, 1, 2))


def _bilinear_coord_grads(g, ctx):
    """g: (N, P, C); returns per-position coordinate grads (N, P)."""
    fx, fy = ctx["fx"], ctx["fy"]
    v00, v01, v10, v11 = ctx["vals"]
    gx = (g * ((1 - fy)[:, :, None] * (v01 - v00) + fy[:, :, None] * (v11 - v10))).sum(axis=2)
    gy = (g * ((1 - fx)[:, :, None] * (v10 - v00) + fx[:, :, None] * (v11 - v01))).sum(axis=2)
    return gx * ctx["in_x"], gy * ctx["in_y"]


def bilinear_warp(img, flow):
    """Backward warp: out(x, y) = bilinear sample of img at (x+u, y+v).

    flow channel 0 is the horizontal displacement u (pixels), channel 1 the
    vertical displacement v. Samples outside the image clamp to the border.
    """
    if img.ndim != 4 or flow.ndim != 4:
        raise ShapeError("bilinear_warp: img and flow must be NCHW")
    if flow.shape[1] != 2:
        raise ShapeError(f"bilinear_warp: flow must have 2 channels, got {flow.shape[1]}")
    N, C, H, W = img.shape
    if flow.shape[0] != N or flow.shape[2] != H or flow.shape[3] != W:
        raise ShapeError(f"bilinear_warp: flow shape {flow.shape} does not match img {img.shape}")
    gy, gx = np.meshgrid(
        np.arange(H, dtype=img.dtype), np.arange(W, dtype=img.dtype), indexing="ij"
    )
    xs = (gx[None] + flow.data[:, 0]).reshape(N, H * W)
    ys = (gy[None] + flow.data[:, 1]).reshape(N, H * W)
    out, ctx = _bilinear_core(img.data, xs, ys)
    out = np.ascontiguousarray(out.reshape(N, H, W, C).transpose(0, 3, 1, 2))

    def bw(g, acc):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(N, H * W, C)
        acc(img, _bilinear_img_grad(g2, ctx, img.dtype))
        gxs, gys = _bilinear_coord_grads(g2, ctx)
        gflow = np.stack([gxs.reshape(N, H, W), gys.reshape(N, H, W)], axis=1)
        acc(flow, gflow.astype(flow.dtype))

    return _make(out, (img, flow), bw)


def bilinear_resize(x, out_h, out_w):
    """Bilinear resize of an NCHW tensor (half-pixel-center convention)."""
    if x.ndim != 4:
        raise ShapeError("bilinear_resize: input must be NCHW")
    N, C, H, W = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize: output size must be positive")
    sy = H / out_h
    sx = W / out_w
    ys1 = (np.arange(out_h, dtype=x.dtype) + 0.5) * sy - 0.5
    xs1 = (np.arange(out_w, dtype=x.dtype) + 0.5) * sx - 0.5
    ysg, xsg = np.meshgrid(ys1, xs1, indexing="ij")
    xs = np.broadcast_to(xsg.reshape(1, -1), (N, out_h * out_w))
    ys = np.broadcast_to(ysg.reshape(1, -1), (N, out_h * out_w))
    out, ctx = _bilinear_core(x.data, xs, ys)
    out = np.ascontiguousarray(out.reshape(N, out_h, out_w, C).transpose(0, 3, 1, 2))

    def bw(g, acc):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(N, out_h * out_w, C)
        acc(x, _bilinear_img_grad(g2, ctx, x.dtype))

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# pixel shuffle


def pixel_shuffle(x, r):
    """Rearrange (N, C*r^2, H, W) -> (N, C, H*r, W*r)."""
    if x.ndim != 4:
        raise ShapeError("pixel_shuffle: input must be NCHW")
    N, C2, H, W = x.shape
    if r < 1 or C2 % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: {C2} channels not divisible by r^2={r * r}")
    C = C2 // (r * r)
    out = (
        x.data.reshape(N, C, r, r, H, W)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(N, C, H * r, W * r)
    )

    def bw(g, acc):
        acc(
            x,
            np.ascontiguousarray(
                g.reshape(N, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(N, C2, H, W)
            ),
        )

    return _make(np.ascontiguousarray(out), (x,), bw)


def pixel_unshuffle(x, r):
    """Inverse of pixel_shuffle: (N, C, H*r, W*r) -> (N, C*r^2, H, W)."""
    if x.ndim != 4:
        raise ShapeError("pixel_unshuffle: input must be NCHW")
    N, C, Hr, Wr = x.shape
    if r < 1 or Hr % r != 0 or Wr % r != 0:
        raise ShapeError(f"pixel_unshuffle: spatial dims {Hr}x{Wr} not divisible by r={r}")
    H, W = Hr // r, Wr // r
    out = x.data.reshape(N, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(N, C * r * r, H, W)

    def bw(g, acc):
        acc(
            x,
            np.ascontiguousarray(
                g.reshape(N, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(N, C, Hr, Wr)
            ),
        )

    return _make(np.ascontiguousarray(out), (x,), bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Populate .grad on every requires_grad leaf reachable from a scalar loss.

    Repeated calls without zeroing accumulate into existing leaf grads.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Iterative DFS topo sort with cycle detection.
    order = []
    state = {}  # id -> 1 (on stack) / 2 (done)
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        nid = id(node)
        if processed:
            state[nid] = 2
            order.append(node)
            continue
        st = state.get(nid)
        if st == 2:
            continue
        if st == 1:
            raise GraphCycleError("cycle detected in recorded graph")
        state[nid] = 1
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and state.get(id(p)) != 2:
                if state.get(id(p)) == 1:
                    raise GraphCycleError("cycle detected in recorded graph")
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}

    def acc(t, g):
        if not t.requires_grad:
            return
        tid = id(t)
        if tid in grads:
            grads[tid] = grads[tid] + g
        else:
            grads[tid] = g

    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g, acc)
        else:
            # leaf
            if node.grad is None:
                node.grad = np.array(g, copy=True)
            else:
                node.grad = node.grad + g
