# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_fallback``; same signatures and results."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expf, tanh, tanhf, INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double GELU_K = 0.7978845608028654
cdef double GELU_C = 0.044715


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t s, Py_ssize_t limit) nogil:
    # first output index o >= 0 with 0 <= o*s + off
    if off >= 0:
        return 0
    return (-off + s - 1) // s


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t s, Py_ssize_t limit, Py_ssize_t n_out) nogil:
    # one past the last output index o with o*s + off < limit
    cdef Py_ssize_t r
    if off >= limit:
        return 0
    r = (limit - 1 - off) // s + 1
    return r if r < n_out else n_out


def im2col(const real[:, :, :, ::1] x, int kh, int kw, int sh, int sw, int ph, int pw,
           int dh, int dw, int ho, int wo):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((c * kh * kw, n * ho * wo), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, base, iy, offx, offy, x0, x1, y0, y1
    with nogil:
        for ch in range(c):
            for i in range(kh):
                offy = i * dh - ph
                y0 = _lo(offy, sh, h)
                y1 = _hi(offy, sh, h, ho)
                for j in range(kw):
                    offx = j * dw - pw
                    x0 = _lo(offx, sw, w)
                    x1 = _hi(offx, sw, w, wo)
                    row = (ch * kh + i) * kw + j
                    for b in range(n):
                        for oy in range(y0, y1):
                            iy = oy * sh + offy
                            base = (b * ho + oy) * wo
                            if sw == 1:
                                for ox in range(x0, x1):
                                    cols[row, base + ox] = x[b, ch, iy, ox + offx]
                            else:
                                for ox in range(x0, x1):
                                    cols[row, base + ox] = x[b, ch, iy, ox * sw + offx]
    return out


def col2im(const real[:, ::1] cols, int n, int c, int h, int w, int kh, int kw, int sh, int sw,
           int ph, int pw, int dh, int dw, int ho, int wo):
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] gx = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, base, iy, offx, offy, x0, x1, y0, y1
    with nogil:
        for ch in range(c):
            for i in range(kh):
                offy = i * dh - ph
                y0 = _lo(offy, sh, h)
                y1 = _hi(offy, sh, h, ho)
                for j in range(kw):
                    offx = j * dw - pw
                    x0 = _lo(offx, sw, w)
                    x1 = _hi(offx, sw, w, wo)
                    row = (ch * kh + i) * kw + j
                    for b in range(n):
                        for oy in range(y0, y1):
                            iy = oy * sh + offy
                            base = (b * ho + oy) * wo
                            for ox in range(x0, x1):
                                gx[b, ch, iy, ox * sw + offx] += cols[row, base + ox]
    return out


def dw_forward(const real[:, :, :, ::1] x, const real[:, :, :, ::1] wt, int sh, int sw, int ph, int pw,
               int dh, int dw, int ho, int wo):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t kh = wt.shape[2], kw = wt.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, ho, wo), dtype=dtype)
    cdef real[:, :, :, ::1] y = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, offx, offy, x0, x1, y0, y1
    cdef real k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    offy = i * dh - ph
                    y0 = _lo(offy, sh, h)
                    y1 = _hi(offy, sh, h, ho)
                    for j in range(kw):
                        offx = j * dw - pw
                        x0 = _lo(offx, sw, w)
                        x1 = _hi(offx, sw, w, wo)
                        k = wt[ch, 0, i, j]
                        for oy in range(y0, y1):
                            iy = oy * sh + offy
                            if sw == 1:
                                for ox in range(x0, x1):
                                    y[b, ch, oy, ox] += k * x[b, ch, iy, ox + offx]
                            else:
                                for ox in range(x0, x1):
                                    y[b, ch, oy, ox] += k * x[b, ch, iy, ox * sw + offx]
    return out


def dw_backward(const real[:, :, :, ::1] x, const real[:, :, :, ::1] wt, const real[:, :, :, ::1] gy,
                int sh, int sw, int ph, int pw, int dh, int dw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t kh = wt.shape[2], kw = wt.shape[3]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((n, c, h, w), dtype=dtype)
    gw_arr = np.zeros((c, 1, kh, kw), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, ix, offx, offy, x0, x1, y0, y1
    cdef real k, g
    cdef double acc
    with nogil:
        for ch in range(c):
            for i in range(kh):
                offy = i * dh - ph
                y0 = _lo(offy, sh, h)
                y1 = _hi(offy, sh, h, ho)
                for j in range(kw):
                    offx = j * dw - pw
                    x0 = _lo(offx, sw, w)
                    x1 = _hi(offx, sw, w, wo)
                    k = wt[ch, 0, i, j]
                    acc = 0.0
                    for b in range(n):
                        for oy in range(y0, y1):
                            iy = oy * sh + offy
                            for ox in range(x0, x1):
                                ix = ox * sw + offx
                                g = gy[b, ch, oy, ox]
                                acc += g * x[b, ch, iy, ix]
                                gx[b, ch, iy, ix] += k * g
                    gw[ch, 0, i, j] = <real>acc
    return gx_arr, gw_arr


def gelu_forward(const real[:, :, :, ::1] x):
    # 0.5 t (1 + tanh u) == t / (1 + exp(-2u)); exp is much cheaper than tanh
    dtype = np.float32 if real is float else np.float64
    out = np.empty_like(np.asarray(x), dtype=dtype)
    cdef const real[::1] xf = np.asarray(x).reshape(-1)
    cdef real[::1] yf = out.reshape(-1)
    cdef Py_ssize_t i, m = xf.shape[0]
    cdef real t, u
    with nogil:
        for i in range(m):
            t = xf[i]
            u = -2 * <real>GELU_K * (t + <real>GELU_C * t * t * t)
            if u > 80:
                u = 80
            if real is float:
                yf[i] = t / (1 + expf(u))
            else:
                yf[i] = t / (1 + exp(u))
    return out


def gelu_backward(const real[:, :, :, ::1] x, const real[:, :, :, ::1] gy):
    dtype = np.float32 if real is float else np.float64
    out = np.empty_like(np.asarray(x), dtype=dtype)
    cdef const real[::1] xf = np.asarray(x).reshape(-1)
    cdef const real[::1] gf = np.asarray(gy).reshape(-1)
    cdef real[::1] yf = out.reshape(-1)
    cdef Py_ssize_t i, m = xf.shape[0]
    cdef real t, x2, u, s
    with nogil:
        for i in range(m):
            t = xf[i]
            x2 = t * t
            u = -2 * <real>GELU_K * (t + <real>GELU_C * x2 * t)
            if u > 80:
                u = 80
            # s = sigmoid(2u') = (1 + tanh u') / 2, so 1 - tanh^2 = 4 s (1 - s)
            if real is float:
                s = 1 / (1 + expf(u))
            else:
                s = 1 / (1 + exp(u))
            yf[i] = gf[i] * (s + 2 * t * s * (1 - s) * <real>GELU_K * (1 + 3 * <real>GELU_C * x2))
    return out


def maxpool2_forward(const real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], ho = x.shape[2] // 2, wo = x.shape[3] // 2
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c, ho, wo), dtype=dtype)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.uint8)
    cdef real[:, :, :, ::1] y = out
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, oy, ox
    cdef real best, v
    cdef unsigned char k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        # row-major window order, first maximum wins
                        best = x[b, ch, 2 * oy, 2 * ox]
                        k = 0
                        v = x[b, ch, 2 * oy, 2 * ox + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, ch, 2 * oy + 1, 2 * ox]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, ch, 2 * oy + 1, 2 * ox + 1]
                        if v > best:
                            best = v
                            k = 3
                        y[b, ch, oy, ox] = best
                        idx[b, ch, oy, ox] = k
    return out, idx_arr


def maxpool2_backward(const real[:, :, :, ::1] gy, const unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, 2 * ho, 2 * wo), dtype=dtype)
    cdef real[:, :, :, ::1] gx = out
    cdef Py_ssize_t b, ch, oy, ox
    cdef unsigned char k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        k = idx[b, ch, oy, ox]
                        gx[b, ch, 2 * oy + (k >> 1), 2 * ox + (k & 1)] = gy[b, ch, oy, ox]
    return out


def upsample2_forward(const real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c, 2 * h, 2 * w), dtype=dtype)
    tmp_arr = np.empty((2 * h, w), dtype=dtype)
    cdef real[:, :, :, ::1] y = out
    cdef real[:, ::1] tmp = tmp_arr
    cdef Py_ssize_t b, ch, r, m, mp, mn
    cdef real a = 0.25, q = 0.75
    with nogil:
        for b in range(n):
            for ch in range(c):
                # rows first, into tmp (2h, w)
                for r in range(h):
                    mp = r - 1 if r > 0 else 0
                    mn = r + 1 if r < h - 1 else h - 1
                    for m in range(w):
                        tmp[2 * r, m] = a * x[b, ch, mp, m] + q * x[b, ch, r, m]
                        tmp[2 * r + 1, m] = q * x[b, ch, r, m] + a * x[b, ch, mn, m]
                for r in range(2 * h):
                    for m in range(w):
                        mp = m - 1 if m > 0 else 0
                        mn = m + 1 if m < w - 1 else w - 1
                        y[b, ch, r, 2 * m] = a * tmp[r, mp] + q * tmp[r, m]
                        y[b, ch, r, 2 * m + 1] = q * tmp[r, m] + a * tmp[r, mn]
    return out


def upsample2_backward(const real[:, :, :, ::1] gy):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], h = gy.shape[2] // 2, w = gy.shape[3] // 2
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    tmp_arr = np.empty((2 * h, w), dtype=dtype)
    cdef real[:, :, :, ::1] gx = out
    cdef real[:, ::1] tmp = tmp_arr
    cdef Py_ssize_t b, ch, r, m, mp, mn
    cdef real a = 0.25, q = 0.75, ge, go
    with nogil:
        for b in range(n):
            for ch in range(c):
                # transpose of the column pass
                for r in range(2 * h):
                    for m in range(w):
                        tmp[r, m] = 0
                    for m in range(w):
                        mp = m - 1 if m > 0 else 0
                        mn = m + 1 if m < w - 1 else w - 1
                        ge = gy[b, ch, r, 2 * m]
                        go = gy[b, ch, r, 2 * m + 1]
                        tmp[r, mp] += a * ge
                        tmp[r, m] += q * ge + q * go
                        tmp[r, mn] += a * go
                # transpose of the row pass
                for r in range(h):
                    mp = r - 1 if r > 0 else 0
                    mn = r + 1 if r < h - 1 else h - 1
                    for m in range(w):
                        gx[b, ch, mp, m] += a * tmp[2 * r, m]
                        gx[b, ch, r, m] += q * tmp[2 * r, m] + q * tmp[2 * r + 1, m]
                        gx[b, ch, mn, m] += a * tmp[2 * r + 1, m]
    return out


def channel_affine(const real[:, :, :, ::1] x, const real[::1] a, const real[::1] b):
    """y[n, c] = x[n, c] * a[c] + b[c]."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], hw = x.shape[2] * x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c, x.shape[2], x.shape[3]), dtype=dtype)
    cdef const real[:, :, ::1] xf = np.asarray(x).reshape(n, c, hw)
    cdef real[:, :, ::1] yf = out.reshape(n, c, hw)
    cdef Py_ssize_t i, ch, k
    cdef real s, t
    with nogil:
        for i in range(n):
            for ch in range(c):
                s = a[ch]
                t = b[ch]
                for k in range(hw):
                    yf[i, ch, k] = xf[i, ch, k] * s + t
    return out


cdef void _edt_1d(const double* f, double* d, Py_ssize_t n, Py_ssize_t* v, double* z) noexcept nogil:
    cdef Py_ssize_t q, p, k = 0, first = -1
    cdef double s
    for q in range(n):
        if f[q] != INFINITY:
            first = q
            break
    if first < 0:
        for q in range(n):
            d[q] = INFINITY
        return
    v[0] = first
    z[0] = -INFINITY
    z[1] = INFINITY
    for q in range(first + 1, n):
        if f[q] == INFINITY:
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
        z[k + 1] = INFINITY
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = (q - p) * (q - p) + f[p]


def edt_sq(mask):
    m = np.ascontiguousarray(mask, dtype=bool)
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1], y, x, L = max(h, w)
    # column pass works on the transpose so every 1-D pass is contiguous
    ft = np.ascontiguousarray(np.where(m, 0.0, np.inf).T)
    gt = np.empty((w, h))
    out = np.empty((h, w))
    cdef double[:, ::1] f = ft
    cdef double[:, ::1] g = gt
    cdef double[:, ::1] o = out
    cdef double[:, ::1] grow = np.empty((h, w))
    cdef Py_ssize_t[::1] v = np.empty(L, dtype=np.intp)
    cdef double[::1] z = np.empty(L + 1)
    with nogil:
        for x in range(w):
            _edt_1d(&f[x, 0], &g[x, 0], h, &v[0], &z[0])
        for y in range(h):
            for x in range(w):
                grow[y, x] = g[x, y]
        for y in range(h):
            _edt_1d(&grow[y, 0], &o[y, 0], w, &v[0], &z[0])
    return out
