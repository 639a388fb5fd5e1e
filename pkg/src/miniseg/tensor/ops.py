"""Differentiable operators over NCHW tensors.

Each op computes its forward result with numpy and registers a closure that
maps the output gradient to input gradients. The set is exactly what the
network and its loss need; nothing here tries to be a general array library.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import Tensor, make_result, record_flops

BN_EPS = 1e-3
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


def _check4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D (N, C, H, W) tensor, got shape {x.shape}")


def out_extent(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


# -- convolution --------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("channel counts must be positive")
        if self.groups <= 0:
            raise ValueError("groups must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must both be divisible by groups={self.groups}"
            )
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride and dilation must be >= 1, padding >= 0")

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        kh, kw = self.kernel
        return (
            out_extent(h, kh, self.stride, self.padding, self.dilation),
            out_extent(w, kw, self.stride, self.padding, self.dilation),
        )


def _tap_slice(i: int, j: int, spec: ConvSpec, ho: int, wo: int):
    s, r = spec.stride, spec.dilation
    return (
        slice(None),
        slice(None),
        slice(i * r, i * r + s * (ho - 1) + 1, s),
        slice(j * r, j * r + s * (wo - 1) + 1, s),
    )


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Grouped, strided, dilated 2-D cross-correlation.

    Evaluated as a sum over kernel taps: each tap is a strided view of the
    padded input multiplied by a (group-batched) weight matrix.
    """
    _check4(x, "conv2d")
    n, c, h, wd = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d: channel axis of input is {c}, expected in_channels={spec.in_channels}")
    if tuple(w.shape) != spec.weight_shape:
        raise ShapeError(f"conv2d: weight shape {tuple(w.shape)} != expected {spec.weight_shape}")
    if spec.has_bias:
        if b is None or tuple(b.shape) != (spec.out_channels,):
            raise ShapeError(f"conv2d: bias must have shape ({spec.out_channels},)")
    elif b is not None:
        raise ShapeError("conv2d: bias given but spec.has_bias is False")
    ho, wo = spec.output_hw(h, wd)
    if ho <= 0:
        raise ShapeError(f"conv2d: non-positive output height {ho} for input height {h}")
    if wo <= 0:
        raise ShapeError(f"conv2d: non-positive output width {wo} for input width {wd}")

    g = spec.groups
    cg = c // g
    og = spec.out_channels // g
    kh, kw = spec.kernel
    p = spec.padding
    dtype = x.dtype
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wdat = w.data.astype(dtype, copy=False)
    depthwise = spec.is_depthwise
    pointwise = kh == kw == 1 and p == 0 and spec.stride == 1

    if pointwise:
        wm = wdat.reshape(g, og, cg)
        out = np.matmul(wm[None], x.data.reshape(n, g, cg, h * wd)).reshape(n, spec.out_channels, ho, wo)
    else:
        out = np.zeros((n, spec.out_channels, ho, wo), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xp[_tap_slice(i, j, spec, ho, wo)]
                if depthwise:
                    out += xs * wdat[:, 0, i, j][None, :, None, None]
                else:
                    wm = wdat[:, :, i, j].reshape(g, og, cg)
                    xs_g = xs.reshape(n, g, cg, ho * wo)
                    out += np.matmul(wm[None], xs_g).reshape(n, spec.out_channels, ho, wo)
    if b is not None:
        out = out + b.data.astype(dtype, copy=False)[None, :, None, None]
    record_flops("conv2d", 2 * out.size * cg * kh * kw)

    def backward_fn(go: np.ndarray):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = go.sum(axis=(0, 2, 3)).astype(b.dtype, copy=False)
        need_x = x.requires_grad
        need_w = w.requires_grad
        if pointwise:
            go_g = go.reshape(n, g, og, ho * wo)
            if need_w:
                xs_g = x.data.reshape(n, g, cg, h * wd)
                gw = np.matmul(go_g, xs_g.transpose(0, 1, 3, 2)).sum(axis=0).reshape(spec.weight_shape)
            if need_x:
                wm = wdat.reshape(g, og, cg)
                gx = np.matmul(wm.transpose(0, 2, 1)[None], go_g).reshape(x.shape)
        else:
            gxp = np.zeros_like(xp) if need_x else None
            gw = np.zeros(spec.weight_shape, dtype=dtype) if need_w else None
            go_g = go.reshape(n, g, og, ho * wo)
            for i in range(kh):
                for j in range(kw):
                    sl = _tap_slice(i, j, spec, ho, wo)
                    if depthwise:
                        if need_w:
                            gw[:, 0, i, j] = (go * xp[sl]).sum(axis=(0, 2, 3))
                        if need_x:
                            gxp[sl] += go * wdat[:, 0, i, j][None, :, None, None]
                    else:
                        if need_w:
                            xs_g = xp[sl].reshape(n, g, cg, ho * wo)
                            gw[:, :, i, j] = (
                                np.matmul(go_g, xs_g.transpose(0, 1, 3, 2)).sum(axis=0).reshape(spec.out_channels, cg)
                            )
                        if need_x:
                            wm = wdat[:, :, i, j].reshape(g, og, cg)
                            gxp[sl] += np.matmul(wm.transpose(0, 2, 1)[None], go_g).reshape(n, c, ho, wo)
            if need_x:
                gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
                gx = np.ascontiguousarray(gx)
        if gw is not None:
            gw = gw.astype(w.dtype, copy=False)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, "conv2d", parents, backward_fn)


# -- pooling ------------------------------------------------------------------

def avg_pool2d(x: Tensor, stride: int = 1, kernel: int = 3, padding: int = 1) -> Tensor:
    """Average pooling; border windows divide by their in-bounds element count."""
    _check4(x, "avg_pool2d")
    if stride not in (1, 2):
        raise ValueError(f"avg_pool2d: stride must be 1 or 2, got {stride}")
    n, c, h, w = x.shape
    spec = ConvSpec(c, c, (kernel, kernel), stride, padding, 1, c)
    ho, wo = spec.output_hw(h, w)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"avg_pool2d: non-positive output extent for input {h}x{w}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    ones = np.pad(np.ones((1, 1, h, w), dtype=x.dtype), ((0, 0), (0, 0), (p, p), (p, p)))
    acc = np.zeros((n, c, ho, wo), dtype=x.dtype)
    count = np.zeros((1, 1, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            sl = _tap_slice(i, j, spec, ho, wo)
            acc += xp[sl]
            count += ones[sl]
    out = acc / count
    record_flops("avg_pool2d", 2 * out.size)

    def backward_fn(go: np.ndarray):
        gs = go / count
        gxp = np.zeros_like(xp)
        for i in range(kernel):
            for j in range(kernel):
                gxp[_tap_slice(i, j, spec, ho, wo)] += gs
        return (np.ascontiguousarray(gxp[:, :, p : p + h, p : p + w]),)

    return make_result(out, "avg_pool2d", (x,), backward_fn)


# -- normalization / activations -------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics over (N, H, W) are used and the
    running buffers are updated in place (unbiased variance, like most
    frameworks); otherwise the running buffers are used.
    """
    _check4(x, "batch_norm")
    c = x.shape[1]
    for name, v in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if v.shape != (c,):
            raise ShapeError(f"batch_norm: {name} has shape {v.shape}, expected ({c},)")
    dtype = x.dtype
    g = gamma.data.astype(dtype, copy=False)[None, :, None, None]
    bt = beta.data.astype(dtype, copy=False)[None, :, None, None]
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean = running_mean.astype(dtype)
        var = running_var.astype(dtype)
        xc = x.data - mean[None, :, None, None]
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)[None, :, None, None]
    xhat = xc * inv_std
    out = xhat * g + bt
    record_flops("batch_norm", 2 * out.size)

    def backward_fn(go: np.ndarray):
        ggamma = (go * xhat).sum(axis=(0, 2, 3)).astype(gamma.dtype, copy=False) if gamma.requires_grad else None
        gbeta = go.sum(axis=(0, 2, 3)).astype(beta.dtype, copy=False) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = go * g
            if training:
                gx = inv_std * (
                    gxhat
                    - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return make_result(out, "batch_norm", (x, gamma, beta), backward_fn)


def prelu(x: Tensor, alpha: Tensor) -> Tensor:
    _check4(x, "prelu")
    c = x.shape[1]
    if alpha.shape != (c,):
        raise ShapeError(f"prelu: alpha has shape {alpha.shape}, expected ({c},)")
    a = alpha.data.astype(x.dtype, copy=False)[None, :, None, None]
    neg = x.data < 0
    out = np.where(neg, a * x.data, x.data)
    record_flops("prelu", 2 * out.size)

    def backward_fn(go: np.ndarray):
        gx = np.where(neg, go * a, go) if x.requires_grad else None
        ga = None
        if alpha.requires_grad:
            ga = np.where(neg, go * x.data, 0).sum(axis=(0, 2, 3)).astype(alpha.dtype, copy=False)
        return gx, ga

    return make_result(out, "prelu", (x, alpha), backward_fn)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype)
    record_flops("relu", 2 * out.size)
    return make_result(out, "relu", (x,), lambda go: (go * pos,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    record_flops("sigmoid", 2 * out.size)
    return make_result(out, "sigmoid", (x,), lambda go: (go * out * (1 - out),))


def _log_softmax_c(d: np.ndarray) -> np.ndarray:
    shifted = d - d.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_channels(x: Tensor) -> Tensor:
    _check4(x, "softmax_channels")
    if x.shape[1] < 2:
        raise ShapeError("softmax_channels: needs at least 2 channels")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    record_flops("softmax", 2 * out.size)

    def backward_fn(go: np.ndarray):
        return (out * (go - (go * out).sum(axis=1, keepdims=True)),)

    return make_result(out, "softmax", (x,), backward_fn)


def cross_entropy(logits: Tensor, target: np.ndarray, class_weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean over pixels of -log softmax(logits)[target].

    ``target`` is an integer array of shape (N, H, W). With ``class_weights``
    the per-pixel terms are weighted and normalized by the total weight.
    """
    _check4(logits, "cross_entropy")
    n, c, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"cross_entropy: target shape {target.shape} != {(n, h, w)}")
    logp = _log_softmax_c(logits.data)
    t = target.astype(np.int64)
    picked = np.take_along_axis(logp, t[:, None], axis=1)[:, 0]
    if class_weights is None:
        pw = np.ones_like(picked)
    else:
        pw = np.asarray(class_weights, dtype=logits.dtype)[t]
    denom = pw.sum()
    loss = np.asarray(-(pw * picked).sum() / denom, dtype=logits.dtype)

    def backward_fn(go: np.ndarray):
        gl = np.exp(logp)
        np.put_along_axis(gl, t[:, None], np.take_along_axis(gl, t[:, None], axis=1) - 1, axis=1)
        return (gl * (pw / denom)[:, None] * go,)

    return make_result(loss, "cross_entropy", (logits,), backward_fn)


# -- elementwise / structural ---------------------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add: shapes {x.shape} and {y.shape} differ")
    out = x.data + y.data
    record_flops("add", out.size)
    return make_result(out, "add", (x, y), lambda go: (go, go))


def mul_broadcast(x: Tensor, a: Tensor) -> Tensor:
    """x * a where a is x-shaped or a single-channel map replicated over channels."""
    if a.shape == x.shape:
        out = x.data * a.data
        record_flops("mul", out.size)
        return make_result(out, "mul", (x, a), lambda go: (go * a.data, go * x.data))
    _check4(x, "mul_broadcast")
    n, c, h, w = x.shape
    if a.shape != (n, 1, h, w):
        raise ShapeError(f"mul_broadcast: multiplier shape {a.shape} must be {x.shape} or {(n, 1, h, w)}")
    out = x.data * a.data
    record_flops("mul", out.size)

    def backward_fn(go: np.ndarray):
        return go * a.data, (go * x.data).sum(axis=1, keepdims=True)

    return make_result(out, "mul", (x, a), backward_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * x.dtype.type(factor)
    return make_result(out, "scale", (x,), lambda go: (go * x.dtype.type(factor),))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_result(out, "sum", (x,), lambda go: (np.broadcast_to(go, x.shape).astype(x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return make_result(out, "mean", (x,), lambda go: (np.full(x.shape, go / x.size, dtype=x.dtype),))


def add_scalars(terms: Sequence[Tensor]) -> Tensor:
    """Sum a list of scalar tensors."""
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    for x in xs:
        _check4(x, "concat_channels")
    n, _, h, w = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: extents {x.shape} do not match {xs[0].shape} outside the channel axis")
    out = np.concatenate([x.data for x in xs], axis=1)
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward_fn(go: np.ndarray):
        return tuple(go[:, bounds[k] : bounds[k + 1]] for k in range(len(xs)))

    return make_result(out, "concat", tuple(xs), backward_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check4(x, "slice_channels")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def backward_fn(go: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = go
        return (gx,)

    return make_result(out, "slice", (x,), backward_fn)


def split_channels(x: Tensor, chunks: int = 2) -> Tuple[Tensor, ...]:
    _check4(x, "split_channels")
    c = x.shape[1]
    if c % chunks:
        raise ShapeError(f"split_channels: {c} channels cannot be split into {chunks} equal chunks")
    step = c // chunks
    return tuple(slice_channels(x, k * step, (k + 1) * step) for k in range(chunks))


# -- bilinear upsampling ----------------------------------------------------------

def bilinear_matrix(size: int, factor: int, dtype=np.float32) -> np.ndarray:
    """(size*factor, size) interpolation matrix, half-pixel centres, edge clamped."""
    out = size * factor
    m = np.zeros((out, size), dtype=np.float64)
    for o in range(out):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        t = src - i0
        m[o, i0] += 1 - t
        m[o, i1] += t
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    _check4(x, "upsample_bilinear")
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample_bilinear: factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return make_result(x.data.copy(), "upsample", (x,), lambda go: (go,))
    n, c, h, w = x.shape
    mh = bilinear_matrix(h, factor, x.dtype)
    mw = bilinear_matrix(w, factor, x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    record_flops("upsample", 2 * out.size)

    def backward_fn(go: np.ndarray):
        return (np.matmul(np.matmul(mh.T, go), mw),)

    return make_result(out, "upsample", (x,), backward_fn)
