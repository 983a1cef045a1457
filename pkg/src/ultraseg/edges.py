"""Canny edge detection and boundary labels derived from region masks."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ShapeError

BOUNDARY_LOW = 0.1
BOUNDARY_HIGH = 0.2

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()

# neighbour offsets (dy, dx) along the gradient for the four direction bins:
# 0 deg, 45 deg, 90 deg, 135 deg (image y axis points down)
_DIRECTIONS = ((0, 1), (1, 1), (1, 0), (1, -1))


def gaussian_kernel(size=5, sigma=1.4):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _as_image(gray):
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim == 4:
        if g.shape[:2] != (1, 1):
            raise ShapeError(f"canny expects a (1,1,H,W) image, got {g.shape}")
        g = g[0, 0]
    if g.ndim != 2:
        raise ShapeError(f"canny expects a 2-D image, got shape {g.shape}")
    return g


def gradients(gray):
    """Smoothed Sobel gradients (gx, gy) with replicated borders."""
    g = ndimage.correlate(_as_image(gray), gaussian_kernel(), mode="nearest")
    gx = ndimage.correlate(g, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(g, SOBEL_Y, mode="nearest")
    return gx, gy


def direction_bins(gx, gy):
    """Quantise gradient angle (mod 180 degrees) into 4 bins."""
    ang = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    return (np.floor((ang + 22.5) / 45.0).astype(np.int64)) % 4


def _shift(a, dy, dx):
    # out[y, x] = a[y + dy, x + dx], zero outside
    h, w = a.shape
    out = np.zeros_like(a)
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[yd, xd] = a[ys, xs]
    return out


def non_max_suppression(mag, bins):
    """Keep pixels that are a maximum along their gradient direction.

    The comparison is >= against the backward neighbour and > against the
    forward one, so a plateau of two equal pixels keeps exactly one.
    """
    keep = np.zeros(mag.shape, dtype=bool)
    for b, (dy, dx) in enumerate(_DIRECTIONS):
        sel = bins == b
        fwd = _shift(mag, dy, dx)
        bwd = _shift(mag, -dy, -dx)
        keep |= sel & (mag >= bwd) & (mag > fwd)
    return keep & (mag > 0)


def hysteresis(strong, weak):
    """Weak pixels survive iff 8-connected to a strong pixel."""
    labels, count = ndimage.label(weak | strong, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return np.zeros(strong.shape, dtype=bool)
    hit = np.zeros(count + 1, dtype=bool)
    hit[labels[strong]] = True
    hit[0] = False
    return hit[labels]


def canny(gray, low=BOUNDARY_LOW, high=BOUNDARY_HIGH, relative=True):
    """Binary edge map (H, W) of a grayscale image.

    With ``relative`` the thresholds are fractions of the largest gradient
    magnitude; otherwise absolute magnitudes.
    """
    if low < 0 or low > high:
        raise ValueError(f"canny thresholds must satisfy 0 <= low <= high, got ({low}, {high})")
    img = _as_image(gray)
    gx, gy = gradients(img)
    mag = np.hypot(gx, gy)
    # round-off in the smoothing leaves ~1e-16 ripples on flat images
    mag[mag < 1e-9 * max(1.0, float(np.abs(img).max()))] = 0.0
    peak = mag.max()
    if peak <= 0:
        return np.zeros(mag.shape, dtype=bool)
    thin = non_max_suppression(mag, direction_bins(gx, gy))
    lo, hi = (low * peak, high * peak) if relative else (low, high)
    strong = thin & (mag >= hi)
    weak = thin & (mag >= lo)
    return hysteresis(strong, weak)


def dilate3x3(mask):
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1)
    h, w = m.shape
    out = np.zeros_like(m)
    for dy in range(3):
        for dx in range(3):
            out |= p[dy:dy + h, dx:dx + w]
    return out


def make_boundary_gt(mask):
    """Canny edges of a binary mask, thickened to 3 px. Returns uint8 (H, W)."""
    m = np.asarray(mask)
    shape = m.shape
    m2 = _as_image(m) > 0.5
    edges = canny(m2.astype(np.float64), BOUNDARY_LOW, BOUNDARY_HIGH)
    out = dilate3x3(edges).astype(np.uint8)
    return out.reshape(shape) if len(shape) == 4 else out
