"""Compiled kernels against the numpy fallback, and backend switching."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ultraseg import _fallback as P
from ultraseg import kernels
from ultraseg.tensor import Rng

C = pytest.importorskip("ultraseg._ckernels", reason="compiled extension not built")

DTYPES = [np.float32, np.float64]
TOL = {np.float32: 2e-5, np.float64: 1e-12}


def _geometry(h, w, k, s, p, d):
    ho = (h + 2 * p - d * (k - 1) - 1) // s + 1
    wo = (w + 2 * p - d * (k - 1) - 1) // s + 1
    return ho, wo


conv_cases = st.tuples(
    st.integers(1, 2),            # n
    st.integers(1, 4),            # c
    st.integers(5, 12),           # h
    st.integers(5, 12),           # w
    st.sampled_from([1, 3, 5]),   # k
    st.integers(1, 2),            # stride
    st.integers(0, 3),            # pad
    st.integers(1, 3),            # dilation
    st.integers(0, 2**31),
)


class TestEquivalence:
    @pytest.mark.parametrize("dtype", DTYPES)
    @given(case=conv_cases)
    def test_im2col_col2im(self, dtype, case):
        n, c, h, w, k, s, p, d, seed = case
        ho, wo = _geometry(h, w, k, s, p, d)
        if ho < 1 or wo < 1:
            return
        x = Rng(seed).tensor((n, c, h, w), dtype=dtype)
        a = P.im2col(x, k, k, s, s, p, p, d, d, ho, wo)
        b = C.im2col(x, k, k, s, s, p, p, d, d, ho, wo)
        np.testing.assert_array_equal(a, b)
        ga = P.col2im(a, n, c, h, w, k, k, s, s, p, p, d, d, ho, wo)
        gb = C.col2im(a, n, c, h, w, k, k, s, s, p, p, d, d, ho, wo)
        np.testing.assert_allclose(ga, gb, rtol=TOL[dtype], atol=TOL[dtype])

    @pytest.mark.parametrize("dtype", DTYPES)
    @given(case=conv_cases)
    def test_depthwise(self, dtype, case):
        n, c, h, w, k, s, p, d, seed = case
        ho, wo = _geometry(h, w, k, s, p, d)
        if ho < 1 or wo < 1:
            return
        r = Rng(seed)
        x = r.tensor((n, c, h, w), dtype=dtype)
        wt = r.tensor((c, 1, k, k), dtype=dtype)
        ya = P.dw_forward(x, wt, s, s, p, p, d, d, ho, wo)
        yb = C.dw_forward(x, wt, s, s, p, p, d, d, ho, wo)
        np.testing.assert_allclose(ya, yb, rtol=TOL[dtype], atol=TOL[dtype])
        gy = r.tensor(ya.shape, dtype=dtype)
        for u, v in zip(P.dw_backward(x, wt, gy, s, s, p, p, d, d), C.dw_backward(x, wt, gy, s, s, p, p, d, d)):
            np.testing.assert_allclose(u, v, rtol=10 * TOL[dtype], atol=10 * TOL[dtype])

    @pytest.mark.parametrize("dtype", DTYPES)
    @given(seed=st.integers(0, 2**31), scale=st.floats(0.1, 50))
    def test_gelu(self, dtype, seed, scale):
        x = (Rng(seed).tensor((2, 3, 5, 4), dtype=np.float64) * scale).astype(dtype)
        g = Rng(seed + 1).tensor(x.shape, dtype=dtype)
        tol = 1e-6 if dtype is np.float32 else 1e-12
        np.testing.assert_allclose(P.gelu_forward(x), C.gelu_forward(x), rtol=tol, atol=tol)
        np.testing.assert_allclose(P.gelu_backward(x, g), C.gelu_backward(x, g), rtol=10 * tol, atol=10 * tol)

    @pytest.mark.parametrize("dtype", DTYPES)
    @given(seed=st.integers(0, 2**31), hh=st.integers(1, 6), ww=st.integers(1, 6))
    def test_maxpool(self, dtype, seed, hh, ww):
        x = Rng(seed).tensor((2, 3, 2 * hh, 2 * ww), dtype=dtype)
        x[0, 0, :2, :2] = 1.0  # an exact tie
        ya, ia = P.maxpool2_forward(x)
        yb, ib = C.maxpool2_forward(x)
        np.testing.assert_array_equal(ya, yb)
        np.testing.assert_array_equal(ia, ib)
        g = Rng(seed + 2).tensor(ya.shape, dtype=dtype)
        np.testing.assert_array_equal(P.maxpool2_backward(g, ia), C.maxpool2_backward(g, ib))

    @pytest.mark.parametrize("dtype", DTYPES)
    @given(seed=st.integers(0, 2**31), h=st.integers(1, 7), w=st.integers(1, 7))
    def test_upsample(self, dtype, seed, h, w):
        x = Rng(seed).tensor((1, 2, h, w), dtype=dtype)
        np.testing.assert_allclose(P.upsample2_forward(x), C.upsample2_forward(x), rtol=TOL[dtype], atol=TOL[dtype])
        g = Rng(seed + 3).tensor((1, 2, 2 * h, 2 * w), dtype=dtype)
        np.testing.assert_allclose(P.upsample2_backward(g), C.upsample2_backward(g), rtol=TOL[dtype], atol=TOL[dtype])

    @pytest.mark.parametrize("dtype", DTYPES)
    def test_channel_affine(self, dtype):
        r = Rng(5)
        x = r.tensor((2, 4, 3, 5), dtype=dtype)
        a, b = r.tensor((4,), dtype=dtype).reshape(-1), r.tensor((4,), dtype=dtype).reshape(-1)
        np.testing.assert_allclose(P.channel_affine(x, a, b), C.channel_affine(x, a, b), rtol=1e-6, atol=1e-6)

    @given(seed=st.integers(0, 2**31), h=st.integers(1, 24), w=st.integers(1, 24), density=st.floats(0, 1))
    def test_edt_sq(self, seed, h, w, density):
        m = Rng(seed).uniform(h * w).reshape(h, w) < density
        a, b = P.edt_sq(m), C.edt_sq(m)
        np.testing.assert_array_equal(a, b)


class TestEdtOracle:
    @given(seed=st.integers(0, 2**31), h=st.integers(1, 12), w=st.integers(1, 12))
    def test_matches_bruteforce(self, seed, h, w):
        m = Rng(seed).uniform(h * w).reshape(h, w) < 0.3
        if not m.any():
            return
        pts = np.argwhere(m)
        yy, xx = np.mgrid[:h, :w]
        brute = ((yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2).min(axis=-1)
        np.testing.assert_array_equal(kernels.edt_sq(m), brute)


class TestSwitching:
    def test_available_lists_compiled(self):
        assert kernels.available() == ("python", "compiled")

    def test_use_backend_restores(self):
        before = kernels.BACKEND
        with kernels.use_backend("python"):
            assert kernels.BACKEND == "python"
            assert kernels.im2col is P.im2col
        assert kernels.BACKEND == before

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.set_backend("gpu")

    def test_env_forces_fallback(self):
        env = dict(os.environ, USEG_KERNELS="python")
        out = subprocess.run([sys.executable, "-c", "from ultraseg import kernels; print(kernels.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"

    def test_model_outputs_agree(self):
        from ultraseg import zoo
        from ultraseg.autodiff import no_grad

        model = zoo.build("ultraseg-130k", seed=3).eval()
        x = Rng(1).tensor((1, 3, 64, 64), 0.0, 1.0)
        with no_grad():
            with kernels.use_backend("python"):
                a = model(x).region.value
            with kernels.use_backend("compiled"):
                b = model(x).region.value
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-4)
