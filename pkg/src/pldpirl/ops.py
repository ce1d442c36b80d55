"""Differentiable operations over :class:`~pldpirl.tensor.Tensor`.

Shapes are explicit: binary elementwise ops accept equal shapes or a scalar
operand (python number or single-element tensor); anything else must be
broadcast with :func:`expand` first. Convolutions and pooling accept a single
``C x H x W`` map or a batch ``N x C x H x W``.
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, DegenerateVectorError, ShapeError, Tensor, as_tensor, make_node

Scalar = Union[int, float]
NORM_EPS = 1e-12


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) or x.data.size == 1


def _binary_operands(a, b, opname: str) -> Tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (a.data.size == 1 or b.data.size == 1):
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ (use expand)")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=DTYPE).reshape(t.shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    out = a.data + b.data
    return make_node(out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    out = a.data - b.data
    return make_node(out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return make_node(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _reduce_to(g / b.data, a), _reduce_to(-g * a.data / b.data**2, b)

    return make_node(out, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor, floor: Optional[float] = None) -> Tensor:
    """Natural log. With ``floor`` the argument is clamped from below and the
    clamped entries receive zero gradient."""
    d = x.data
    if floor is not None:
        active = d > floor
        d = np.where(active, d, floor)
    else:
        active = None
    out = np.log(d)

    def backward(g):
        gx = g / d
        return (gx if active is None else gx * active,)

    return make_node(out, (x,), backward, "log")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return make_node(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``x`` to ``shape`` (numpy broadcasting rules)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    stretched = tuple(i + lead for i, n in enumerate(x.shape) if n == 1 and shape[i + lead] != 1)

    def backward(g):
        r = g.sum(axis=tuple(range(lead))) if lead else g
        if stretched:
            r = r.sum(axis=tuple(i - lead for i in stretched), keepdims=True)
        return (r.reshape(x.shape),)

    return make_node(np.ascontiguousarray(out), (x,), backward, "expand")


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_node(np.array(out, dtype=DTYPE), (x,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, tensors, backward, "concat")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def amax(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties route the gradient to the first maximum."""
    axis = axis % x.ndim
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis)
    if not keepdims:
        out = out.squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, arg, gk, axis=axis)
        return (gx,)

    return make_node(out, (x,), backward, "amax")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product along the last axis."""
    return sum(mul(a, b), axis=-1)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return make_node(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape [d] or [n, d]."""
    single = x.ndim == 1
    x2 = reshape(x, (1, x.shape[0])) if single else x
    out = matmul(x2, weight)
    if bias is not None:
        out = add(out, expand(bias, out.shape))
    return reshape(out, (out.shape[1],)) if single else out


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------
def _batched(x: Tensor, opname: str) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{opname}: expected C x H x W or N x C x H x W input, got {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding (im2col + one GEMM)."""
    x4, single = _batched(x, "conv2d")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be C_out x C_in x kh x kw, got {kernels.shape}")
    n, c, h, w = x4.shape
    co, ci, kh, kw = kernels.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernels {kernels.shape} expect {ci}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = x4.data
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
        xp[:, :, padding:padding + h, padding:padding + w] = x4.data
    # non-overlapping windows tile the input exactly: im2col is a pure reshape
    tiled = stride == kh == kw and not padding and h % kh == 0 and w % kw == 0
    if tiled:
        cols = xp.reshape(n, c, ho, kh, wo, kw).transpose(0, 2, 4, 1, 3, 5).reshape(n * ho * wo, c * kh * kw)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernels.data.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gk = (g2.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x4.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            if tiled:
                gx = dcols.transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h, w)
            else:
                # one bulk transpose so each tap below adds a contiguous block
                dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))
                gxp = np.zeros(xp.shape, dtype=DTYPE)
                hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x4, kernels, bias) if bias is not None else (x4, kernels)
    res = make_node(out, parents, backward, "conv2d")
    return reshape(res, res.shape[1:]) if single else res


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    x4, single = _batched(x, "max_pool2d")
    n, c, h, w = x4.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"max_pool2d: window {kernel} larger than input {h}x{w}")
    ho = conv_output_size(h, kernel, stride, 0)
    wo = conv_output_size(w, kernel, stride, 0)
    win = sliding_window_view(x4.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x4.data)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kernel):
            for j in range(kernel):
                hit = arg == i * kernel + j
                gx[:, :, i:i + hs:stride, j:j + ws:stride] += g * hit
        return (gx,)

    res = make_node(out, (x4,), backward, "max_pool2d")
    return reshape(res, res.shape[1:]) if single else res


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool: expected a 3-D or 4-D map, got {x.shape}")
    return mean(x, axis=(-2, -1))


def global_max_pool(x: Tensor) -> Tensor:
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_max_pool: expected a 3-D or 4-D map, got {x.shape}")
    lead = x.shape[:-2]
    flat = reshape(x, lead + (x.shape[-2] * x.shape[-1],))
    return amax(flat, axis=-1)


# ---------------------------------------------------------------------------
# normalization, similarity, softmax
# ---------------------------------------------------------------------------
def l2_normalize(v: Tensor, axis: int = -1) -> Tensor:
    """Scale ``v`` to unit Euclidean norm along ``axis``."""
    norm = np.sqrt(np.sum(v.data * v.data, axis=axis, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateVectorError(f"cannot normalize a vector with norm {float(norm.min()):.3g}")
    out = v.data / norm

    def backward(g):
        return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)

    return make_node(out, (v,), backward, "l2_normalize")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    return dot(l2_normalize(a), l2_normalize(b))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return make_node(out, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return make_node(out, (x,), backward, "log_softmax")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) over one axis, shifted by the max for stability."""
    axis = axis % x.ndim
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(np.log(s) + m, axis=axis)
    p = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * p,)

    return make_node(out, (x,), backward, "logsumexp")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    onehot = np.zeros(logits.shape, dtype=DTYPE)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = sum(mul(log_softmax(logits), Tensor(onehot)))
    return mul(picked, -1.0 / len(labels))
