"""Differentiable layer primitives.

All ops take and return :class:`~ultraseg.autodiff.Variable`. Convolution
is cross-correlation (no kernel flip). Learnable per-channel vectors (conv
bias, BN gamma/beta) are stored as (1, C, 1, 1) tensors so that every
parameter is itself a rank-4 tensor.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernels
from .autodiff import Variable, constant, record
from .errors import DegenerateBatchError, DivisibilityError, GeometryError, ShapeError
from .tensor import DTYPE

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair(v):
    if isinstance(v, int):
        return (v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 2:
        raise ValueError(f"expected an int or a pair, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    dilation: tuple = (1, 1)
    groups: int = 1

    def __post_init__(self):
        for field in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, field, _pair(getattr(self, field)))
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ShapeError(f"channel counts and groups must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise DivisibilityError(
                f"groups={self.groups} must divide in={self.in_channels} and out={self.out_channels}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1 or min(self.padding) < 0:
            raise ShapeError(f"invalid conv geometry: {self}")

    @property
    def depthwise(self):
        return self.groups == self.in_channels == self.out_channels and self.groups > 1

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    def output_size(self, h, w):
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = self.kernel, self.stride, self.padding, self.dilation
        ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        return ho, wo

    def macs(self, h, w):
        ho, wo = self.output_size(h, w)
        kh, kw = self.kernel
        return ho * wo * self.out_channels * (self.in_channels // self.groups) * kh * kw


_trace = threading.local()


@contextlib.contextmanager
def trace_convs():
    """Collect (spec, input_hw) for every conv2d call made in this thread."""
    log = []
    prev = getattr(_trace, "log", None)
    _trace.log = log
    try:
        yield log
    finally:
        _trace.log = prev


def _dense_forward(x, w, spec, ho, wo):
    n, c = x.shape[:2]
    (kh, kw), (sh, sw), (ph, pw), (dh, dw) = spec.kernel, spec.stride, spec.padding, spec.dilation
    o = w.shape[0]
    if (kh, kw, sh, sw, ph, pw) == (1, 1, 1, 1, 0, 0):
        cols = x.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    else:
        cols = kernels.im2col(x, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo)
    y = w.reshape(o, -1) @ cols
    y = y.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(y), cols


def _dense_backward(x_shape, w, cols, gy, spec):
    n, c, h, wd = x_shape
    (kh, kw), (sh, sw), (ph, pw), (dh, dw) = spec.kernel, spec.stride, spec.padding, spec.dilation
    o, _, ho, wo = gy.shape[1], None, gy.shape[2], gy.shape[3]
    gy2 = gy.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
    gw = (gy2 @ cols.T).reshape(w.shape)
    gcols = w.reshape(o, -1).T @ gy2
    if (kh, kw, sh, sw, ph, pw) == (1, 1, 1, 1, 0, 0):
        gx = np.ascontiguousarray(gcols.reshape(c, n, h, wd).transpose(1, 0, 2, 3))
    else:
        gx = kernels.col2im(gcols, n, c, h, wd, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo)
    return gx, gw


def conv2d(x: Variable, spec: ConvSpec, weight: Variable, bias: Variable | None = None) -> Variable:
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv2d: weight shape {weight.shape} != {spec.weight_shape}")
    if bias is not None and bias.shape != (1, spec.out_channels, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != (1, {spec.out_channels}, 1, 1)")
    ho, wo = spec.output_size(h, w)
    if ho < 1 or wo < 1:
        raise GeometryError(f"conv2d: non-positive output size {(ho, wo)} for input {(h, w)}")
    log = getattr(_trace, "log", None)
    if log is not None:
        log.append((spec, (h, w)))

    dtype = np.result_type(x.dtype, weight.dtype)
    xv = np.ascontiguousarray(x.value, dtype=dtype)
    wv = np.ascontiguousarray(weight.value, dtype=dtype)
    (sh, sw), (ph, pw), (dh, dw) = spec.stride, spec.padding, spec.dilation
    g = spec.groups
    saved = None
    if spec.depthwise:
        y = kernels.dw_forward(xv, wv, sh, sw, ph, pw, dh, dw, ho, wo)
    elif g == 1:
        y, saved = _dense_forward(xv, wv, spec, ho, wo)
    else:
        ci, co = c // g, spec.out_channels // g
        outs, saved = [], []
        for k in range(g):
            sub = ConvSpec(ci, co, spec.kernel, spec.stride, spec.padding, spec.dilation)
            yk, colk = _dense_forward(np.ascontiguousarray(xv[:, k * ci:(k + 1) * ci]),
                                      wv[k * co:(k + 1) * co], sub, ho, wo)
            outs.append(yk)
            saved.append((sub, colk))
        y = np.concatenate(outs, axis=1)
    if bias is not None:
        y += bias.value.astype(dtype, copy=False)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(gy):
        if spec.depthwise:
            gx, gw = kernels.dw_backward(xv, wv, np.ascontiguousarray(gy), sh, sw, ph, pw, dh, dw)
        elif g == 1:
            gx, gw = _dense_backward(xv.shape, wv, saved, gy, spec)
        else:
            gxs, gws = [], []
            for k, (sub, colk) in enumerate(saved):
                gyk = np.ascontiguousarray(gy[:, k * co:(k + 1) * co])
                gxk, gwk = _dense_backward((n, ci, h, w), wv[k * co:(k + 1) * co], colk, gyk, sub)
                gxs.append(gxk)
                gws.append(gwk)
            gx, gw = np.concatenate(gxs, axis=1), np.concatenate(gws, axis=0)
        grads = [gx if x.requires_grad else None, gw]
        if bias is not None:
            grads.append(gy.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1))
        return grads

    return record(y, parents, fn, "conv2d")


class BNState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels, momentum=BN_MOMENTUM, eps=BN_EPS):
        self.running_mean = np.zeros((1, channels, 1, 1), dtype=DTYPE)
        self.running_var = np.ones((1, channels, 1, 1), dtype=DTYPE)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x: Variable, gamma: Variable, beta: Variable, state: BNState, mode="train") -> Variable:
    n, c, h, w = x.shape
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p.shape != (1, c, 1, 1):
            raise ShapeError(f"batchnorm2d: {name} shape {p.shape} != (1, {c}, 1, 1)")
    if state.running_mean.shape != (1, c, 1, 1):
        raise ShapeError("batchnorm2d: running statistics do not match channel count")
    xv = x.value
    dtype = xv.dtype
    gv = gamma.value.astype(dtype, copy=False)
    bv = beta.value.astype(dtype, copy=False)
    eps = state.eps
    if mode == "train":
        m = n * h * w
        if m == 1:
            raise DegenerateBatchError("batchnorm2d: N*H*W == 1 in train mode")
        mean = xv.mean(axis=(0, 2, 3), keepdims=True)
        xc = xv - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + dtype.type(eps))
        xhat = xc * inv
        y = xhat * gv + bv
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))

        def fn(gy):
            gbeta = gy.sum(axis=(0, 2, 3), keepdims=True)
            ggamma = (gy * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = None
            if x.requires_grad:
                # d/dx of normalisation, in terms of per-channel sums of the output grad
                gx = (gv * inv / m) * (m * gy - gbeta - xhat * ggamma)
            return gx, ggamma, gbeta
    elif mode in ("infer", "eval"):
        inv = 1.0 / np.sqrt(state.running_var.astype(dtype) + dtype.type(eps))
        a = gv * inv
        b = bv - state.running_mean.astype(dtype) * a
        y = kernels.channel_affine(np.ascontiguousarray(xv), a.reshape(-1), b.reshape(-1))

        def fn(gy):
            xhat = (xv - state.running_mean.astype(dtype)) * inv
            return (gy * a if x.requires_grad else None,
                    (gy * xhat).sum(axis=(0, 2, 3), keepdims=True),
                    gy.sum(axis=(0, 2, 3), keepdims=True))
    else:
        raise ValueError(f"batchnorm2d: unknown mode {mode!r}")
    return record(y, (x, gamma, beta), fn, "batchnorm2d")


def gelu(x: Variable) -> Variable:
    xv = np.ascontiguousarray(x.value)
    return record(kernels.gelu_forward(xv), (x,),
                  lambda g: (kernels.gelu_backward(xv, np.ascontiguousarray(g)),), "gelu")


def sigmoid(x: Variable) -> Variable:
    s = expit(x.value)
    return record(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def relu(x: Variable) -> Variable:
    xv = x.value
    return record(np.maximum(xv, 0), (x,), lambda g: (g * (xv > 0),), "relu")


_ACTIVATIONS = {"gelu": gelu, "sigmoid": sigmoid, "relu": relu}


def activation(x: Variable, kind: str) -> Variable:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def softmax_channels(x: Variable) -> Variable:
    xv = x.value
    e = np.exp(xv - xv.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return record(s, (x,), fn, "softmax")


def _check_even(x, op):
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise GeometryError(f"{op}: H and W must be even, got {(h, w)}")


def maxpool2(x: Variable) -> Variable:
    _check_even(x, "maxpool2")
    y, idx = kernels.maxpool2_forward(np.ascontiguousarray(x.value))
    return record(y, (x,), lambda g: (kernels.maxpool2_backward(np.ascontiguousarray(g), idx),), "maxpool2")


def avgpool2(x: Variable) -> Variable:
    _check_even(x, "avgpool2")
    n, c, h, w = x.shape
    xv = x.value
    y = xv.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def fn(g):
        q = (g * g.dtype.type(0.25))[:, :, :, None, :, None]
        return (np.broadcast_to(q, (n, c, h // 2, 2, w // 2, 2)).reshape(n, c, h, w),)

    return record(y, (x,), fn, "avgpool2")


def upsample_bilinear2(x: Variable) -> Variable:
    y = kernels.upsample2_forward(np.ascontiguousarray(x.value))
    return record(y, (x,), lambda g: (kernels.upsample2_backward(np.ascontiguousarray(g)),), "upsample2")


def concat_channels(parts) -> Variable:
    parts = [constant(p) for p in parts]
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    n, _, h, w = parts[0].shape
    for p in parts:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: N/H/W mismatch {p.shape} vs {parts[0].shape}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    y = np.concatenate([p.value for p in parts], axis=1)

    def fn(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return record(y, parts, fn, "concat")


def channel_slice(x: Variable, start: int, stop: int) -> Variable:
    xv = x.value
    shape = x.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return record(np.ascontiguousarray(xv[:, start:stop]), (x,), fn, "slice")


def split_channels(x: Variable, k: int) -> list:
    c = x.shape[1]
    if k < 1 or c % k:
        raise DivisibilityError(f"cannot split {c} channels into {k} equal groups")
    if k == 1:
        return [x]
    step = c // k
    return [channel_slice(x, j * step, (j + 1) * step) for j in range(k)]


def channel_mean(x: Variable) -> Variable:
    c = x.shape[1]
    y = x.value.mean(axis=1, keepdims=True)
    return record(y, (x,), lambda g: (np.broadcast_to(g / c, x.shape).copy(),), "channel_mean")


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Output channel k takes input channel perm[k] (reshape (G, C/G), transpose, flatten)."""
    if groups < 1 or channels % groups:
        raise DivisibilityError(f"cannot shuffle {channels} channels in {groups} groups")
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x: Variable, groups: int) -> Variable:
    perm = shuffle_permutation(x.shape[1], groups)
    inv = np.argsort(perm)
    return record(np.ascontiguousarray(x.value[:, perm]), (x,), lambda g: (g[:, inv],), "shuffle")
