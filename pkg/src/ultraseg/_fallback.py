"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_ckernels`` extension; ``ultraseg.kernels`` picks one at import time.
Arrays are float32 or float64 and C-contiguous on input.
"""

import math

import numpy as np

GELU_K = math.sqrt(2.0 / math.pi)
GELU_C = 0.044715


def _window(xp, i, j, sh, sw, dh, dw, ho, wo):
    hs, ws = i * dh, j * dw
    return xp[:, :, hs:hs + sh * (ho - 1) + 1:sh, ws:ws + sw * (wo - 1) + 1:sw]


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def im2col(x, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo):
    """Patch matrix of shape (C*kh*kw, N*ho*wo); row index c*kh*kw + i*kw + j."""
    n, c = x.shape[:2]
    xp = _pad(x, ph, pw)
    cols = np.empty((c, kh * kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i * kw + j] = _window(xp, i, j, sh, sw, dh, dw, ho, wo).transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols, n, c, h, w, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo):
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    cols = cols.reshape(c, kh * kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            _window(gxp, i, j, sh, sw, dh, dw, ho, wo)[...] += cols[:, i * kw + j].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + w])


def dw_forward(x, w, sh, sw, ph, pw, dh, dw, ho, wo):
    n, c = x.shape[:2]
    kh, kw = w.shape[2:]
    xp = _pad(x, ph, pw)
    y = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            y += _window(xp, i, j, sh, sw, dh, dw, ho, wo) * w[:, 0, i, j][None, :, None, None]
    return y


def dw_backward(x, w, gy, sh, sw, ph, pw, dh, dw):
    n, c, h, wd = x.shape
    kh, kw = w.shape[2:]
    ho, wo = gy.shape[2:]
    xp = _pad(x, ph, pw)
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for i in range(kh):
        for j in range(kw):
            gw[:, 0, i, j] = np.einsum("nchw,nchw->c", _window(xp, i, j, sh, sw, dh, dw, ho, wo), gy)
            _window(gxp, i, j, sh, sw, dh, dw, ho, wo)[...] += gy * w[:, 0, i, j][None, :, None, None]
    gx = np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + wd])
    return gx, gw


def gelu_forward(x):
    u = GELU_K * (x + GELU_C * x * x * x)
    return (0.5 * x * (1.0 + np.tanh(u))).astype(x.dtype, copy=False)


def gelu_backward(x, gy):
    x2 = x * x
    t = np.tanh(GELU_K * (x + GELU_C * x2 * x))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x2)
    return (gy * d).astype(x.dtype, copy=False)


def maxpool2_forward(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(gy, idx):
    n, c, ho, wo = gy.shape
    g = np.zeros((n, c, ho, wo, 4), dtype=gy.dtype)
    np.put_along_axis(g, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    g = g.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g.reshape(n, c, 2 * ho, 2 * wo))


def _up_axis(x, axis):
    # out[2m] = .25 x[m-1] + .75 x[m]; out[2m+1] = .75 x[m] + .25 x[m+1]; edges clamp
    n = x.shape[axis]
    prev = np.take(x, np.r_[0, np.arange(n - 1)], axis=axis)
    nxt = np.take(x, np.r_[np.arange(1, n), n - 1], axis=axis)
    even = 0.25 * prev + 0.75 * x
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up_axis_t(g, axis):
    g = np.moveaxis(g, axis, -1)
    even, odd = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (even + odd)
    # even[m] also pulls .25 from x[m-1], odd[m] from x[m+1], clamped at the ends
    out[..., :-1] += 0.25 * even[..., 1:]
    out[..., :1] += 0.25 * even[..., :1]
    out[..., 1:] += 0.25 * odd[..., :-1]
    out[..., -1:] += 0.25 * odd[..., -1:]
    return np.moveaxis(out, -1, axis)


def upsample2_forward(x):
    y = _up_axis(_up_axis(x, 2), 3)
    return np.ascontiguousarray(y, dtype=x.dtype)


def upsample2_backward(gy):
    g = _up_axis_t(_up_axis_t(gy, 3), 2)
    return np.ascontiguousarray(g, dtype=gy.dtype)


def _edt_1d(f):
    """Lower envelope of parabolas; squared distance transform of one row."""
    n = len(f)
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    first = -1
    for q in range(n):
        if f[q] != np.inf:
            first = q
            break
    if first < 0:
        d.fill(np.inf)
        return d
    v[0] = first
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(first + 1, n):
        if f[q] == np.inf:
            continue
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2 * q - 2 * p)
            if s <= z[k]:
                k -= 1
                continue
            break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = (q - p) * (q - p) + f[p]
    return d


def edt_sq(mask):
    """Squared Euclidean distance from every pixel to the nearest True pixel.

    Two separable passes (columns, then rows). Returns +inf everywhere when
    the mask is empty.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    f = np.where(mask, 0.0, np.inf)
    g = np.empty((h, w))
    for x in range(w):
        g[:, x] = _edt_1d(f[:, x])
    out = np.empty((h, w))
    for y in range(h):
        out[y] = _edt_1d(g[y])
    return out


def channel_affine(x, a, b):
    """y[n, c] = x[n, c] * a[c] + b[c]."""
    y = x * a.reshape(1, -1, 1, 1)
    y += b.reshape(1, -1, 1, 1)
    return y
