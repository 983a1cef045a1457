import time

import numpy as np
import pytest
from scipy import ndimage

from ultraseg import edges as E


def disk(size=128, radius=40, center=None):
    cy, cx = center or (size / 2 - 0.5, size / 2 - 0.5)
    yy, xx = np.mgrid[:size, :size]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2).astype(np.float64)


def mask_sign_changes(mask):
    """Pixels whose 4-neighbourhood contains both labels."""
    m = mask.astype(bool)
    return m ^ ndimage.binary_erosion(m, border_value=1) | ~m ^ ndimage.binary_erosion(~m, border_value=1)


def within(edge, target, radius):
    dist = ndimage.distance_transform_edt(~target)
    return bool(np.all(dist[edge] <= radius))


class TestCanny:
    def test_gaussian_kernel(self):
        k = E.gaussian_kernel()
        assert k.shape == (5, 5) and k.sum() == pytest.approx(1.0)
        assert np.array_equal(k, k.T) and k[2, 2] == k.max()

    def test_constant_image(self):
        assert not E.canny(np.full((32, 32), 0.7)).any()

    def test_vertical_step(self):
        img = np.zeros((40, 40))
        img[:, 20:] = 1
        e = E.canny(img)
        interior = e[6:-6]
        cols = np.nonzero(interior.any(axis=0))[0]
        assert len(cols) == 1 and cols[0] in (19, 20)
        assert interior[:, cols[0]].all()

    def test_disk_ring(self):
        m = disk()
        e = E.canny(m)
        yy, xx = np.nonzero(e)
        r = np.hypot(yy - 63.5, xx - 63.5)
        assert np.all(np.abs(r - 40) <= 2)
        # closed: the ring separates inside from outside
        labels, count = ndimage.label(~E.dilate3x3(e))
        assert count == 2

    def test_nms_subset(self):
        rng = np.random.default_rng(3)
        img = ndimage.gaussian_filter(rng.uniform(size=(48, 48)), 2)
        e = E.canny(img)
        gx, gy = E.gradients(img)
        thin = E.non_max_suppression(np.hypot(gx, gy), E.direction_bins(gx, gy))
        assert e.any() and not np.any(e & ~thin)

    def test_accepts_batched_input(self):
        img = np.zeros((1, 1, 24, 24))
        img[..., 12:] = 1
        assert E.canny(img).shape == (24, 24)

    def test_thresholds_validated(self):
        with pytest.raises(ValueError):
            E.canny(np.zeros((8, 8)), 0.3, 0.2)
        with pytest.raises(ValueError):
            E.canny(np.zeros((8, 8)), -0.1, 0.2)


class TestBoundaryGT:
    def test_empty_and_full(self):
        assert not E.make_boundary_gt(np.zeros((64, 64))).any()
        full = E.make_boundary_gt(np.ones((64, 64)))
        assert not full[3:-3, 3:-3].any()

    def test_square(self):
        m = np.zeros((128, 128))
        m[34:94, 34:94] = 1
        b = E.make_boundary_gt(m).astype(bool)
        assert within(b, mask_sign_changes(m), 2)
        perimeter = 4 * 60
        assert 0.75 * 3 * perimeter <= b.sum() <= 1.25 * 3 * perimeter

    def test_disk_consistency(self):
        m = disk(radius=30)
        b = E.make_boundary_gt(m).astype(bool)
        assert b.any() and within(b, mask_sign_changes(m), 2)

    def test_complement_symmetry(self):
        m = disk(96, 25)
        a = E.make_boundary_gt(m).astype(bool)
        b = E.make_boundary_gt(1 - m).astype(bool)
        assert not np.any(a & ~E.dilate3x3(b)) and not np.any(b & ~E.dilate3x3(a))

    def test_shape_and_dtype(self):
        out = E.make_boundary_gt(disk(64, 20)[None, None])
        assert out.shape == (1, 1, 64, 64) and out.dtype == np.uint8
        assert set(np.unique(out)) <= {0, 1}

    def test_speed(self):
        m = disk(256, 80)
        E.make_boundary_gt(m)
        t0 = time.perf_counter()
        E.make_boundary_gt(m)
        assert time.perf_counter() - t0 < 0.05
