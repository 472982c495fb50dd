"""Kernel backends against brute-force oracles and against each other."""

import numpy as np
import pytest

from okdcount import _kernels as K
from okdcount._kernels import _numpy as np_impl

from naive import adaptive_avg_pool_naive, conv2d_naive, maxpool2d_naive

try:
    from okdcount._kernels import _core as cy_impl
except ImportError:
    cy_impl = None

BACKENDS = [("numpy", np_impl)] + ([("compiled", cy_impl)] if cy_impl else [])


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.mark.parametrize("name,impl", BACKENDS)
class TestConvOracle:
    def test_forward_matches_naive(self, name, impl, rng):
        for _ in range(10):
            B, Ci, Co = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
            H, W = rng.integers(5, 10), rng.integers(5, 10)
            d = int(rng.integers(1, 3))
            if H <= 2 * d or W <= 2 * d:
                continue
            x = rng.normal(size=(B, Ci, H, W))
            w = rng.normal(size=(Co, Ci, 3, 3))
            b = rng.normal(size=Co)
            pad = d
            got = impl.conv2d_forward(x, w, b, d, pad, 1)
            want = conv2d_naive(x, w, b, dilation=d, padding=pad)
            assert np.allclose(got, want, atol=1e-10)

    def test_forward_zero_padding(self, name, impl, rng):
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = impl.conv2d_forward(x, w, b, 1, 0, 1)
        assert got.shape == (2, 4, 5, 4)
        assert np.allclose(got, conv2d_naive(x, w, b, padding=0), atol=1e-10)

    def test_backward_input_is_transpose(self, name, impl, rng):
        # <conv(x), g> must equal <x, conv_backward_input(g)>
        for d in (1, 2):
            x = rng.normal(size=(2, 3, 9, 9))
            w = rng.normal(size=(4, 3, 3, 3))
            b = np.zeros(4)
            pad = d
            out = impl.conv2d_forward(x, w, b, d, pad, 1)
            g = rng.normal(size=out.shape)
            gin = impl.conv2d_backward_input(g, w, d, pad, 9, 9, 1)
            assert np.isclose((out * g).sum() - (g.sum(axis=(0, 2, 3)) * b).sum(),
                              (x * gin).sum(), rtol=1e-10)

    def test_backward_weight_finite_difference(self, name, impl, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = impl.conv2d_forward(x, w, b, 1, 1, 1)
        g = rng.normal(size=out.shape)
        gw, gb = impl.conv2d_backward_weight(g, x, 3, 3, 1, 1, 1)
        eps = 1e-6
        for idx in [(0, 0, 0, 0), (2, 1, 2, 2), (1, 0, 1, 2)]:
            wp = w.copy()
            wp[idx] += eps
            wm = w.copy()
            wm[idx] -= eps
            fp = (impl.conv2d_forward(x, wp, b, 1, 1, 1) * g).sum()
            fm = (impl.conv2d_forward(x, wm, b, 1, 1, 1) * g).sum()
            assert np.isclose(gw[idx], (fp - fm) / (2 * eps), rtol=1e-5, atol=1e-8)
        assert np.allclose(gb, g.sum(axis=(0, 2, 3)), atol=1e-10)


@pytest.mark.parametrize("name,impl", BACKENDS)
class TestPoolOracle:
    def test_maxpool_matches_naive(self, name, impl, rng):
        for _ in range(10):
            B, C = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            Ho, Wo = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            x = rng.normal(size=(B, C, Ho * 2, Wo * 2))
            out, idx = impl.maxpool2d_forward(x, 2, 2, 1)
            assert np.array_equal(out, maxpool2d_naive(x, 2, 2))

    def test_maxpool_single_window(self, name, impl):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out, _ = impl.maxpool2d_forward(x, 2, 2, 1)
        assert out.reshape(()) == 4.0

    def test_maxpool_ties_route_to_first(self, name, impl):
        # all-equal window: the whole incoming gradient lands on the
        # first element in row-major order
        x = np.ones((1, 1, 2, 2))
        out, idx = impl.maxpool2d_forward(x, 2, 2, 1)
        g = np.array([[[[5.0]]]])
        gin = impl.maxpool2d_backward(g, idx, 2, 2, 2, 2, 1)
        assert gin[0, 0, 0, 0] == 5.0
        assert gin.sum() == 5.0

    def test_maxpool_backward_scatters_to_argmax(self, name, impl, rng):
        x = rng.normal(size=(2, 3, 8, 6))
        out, idx = impl.maxpool2d_forward(x, 2, 2, 1)
        g = rng.normal(size=out.shape)
        gin = impl.maxpool2d_backward(g, idx, 2, 2, 8, 6, 1)
        assert np.isclose(gin.sum(), g.sum())
        # per window: the whole gradient lands on the max position only
        for bi in range(2):
            for c in range(3):
                for oi in range(4):
                    for oj in range(3):
                        win_x = x[bi, c, 2 * oi : 2 * oi + 2, 2 * oj : 2 * oj + 2]
                        win_g = gin[bi, c, 2 * oi : 2 * oi + 2, 2 * oj : 2 * oj + 2]
                        hit = win_g != 0.0
                        assert hit.sum() == 1
                        assert win_x[hit][0] == win_x.max()
                        assert win_g[hit][0] == g[bi, c, oi, oj]

    def test_adaptive_matches_naive(self, name, impl, rng):
        for _ in range(10):
            H, W = int(rng.integers(3, 12)), int(rng.integers(3, 12))
            oh = int(rng.integers(1, H + 1))
            ow = int(rng.integers(1, W + 1))
            x = rng.normal(size=(2, 3, H, W))
            got = impl.adaptive_avg_pool_forward(x, oh, ow, 1)
            assert np.allclose(got, adaptive_avg_pool_naive(x, oh, ow), atol=1e-12)

    def test_adaptive_identity_when_sizes_match(self, name, impl, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        assert np.allclose(impl.adaptive_avg_pool_forward(x, 5, 5, 1), x)

    def test_adaptive_global(self, name, impl, rng):
        x = rng.normal(size=(2, 3, 7, 5))
        got = impl.adaptive_avg_pool_forward(x, 1, 1, 1)
        assert np.allclose(got[..., 0, 0], x.mean(axis=(2, 3)))

    def test_adaptive_backward_redistributes(self, name, impl, rng):
        # non-divisible extents exercise overlapping bin edges
        x = rng.normal(size=(1, 2, 7, 7))
        out = impl.adaptive_avg_pool_forward(x, 3, 3, 1)
        g = rng.normal(size=out.shape)
        gin = impl.adaptive_avg_pool_backward(g, 7, 7, 1)
        eps = 1e-6
        for idx in [(0, 0, 0, 0), (0, 1, 3, 3), (0, 0, 6, 6), (0, 1, 2, 4)]:
            xp = x.copy()
            xp[idx] += eps
            xm = x.copy()
            xm[idx] -= eps
            fp = (impl.adaptive_avg_pool_forward(xp, 3, 3, 1) * g).sum()
            fm = (impl.adaptive_avg_pool_forward(xm, 3, 3, 1) * g).sum()
            assert np.isclose(gin[idx], (fp - fm) / (2 * eps), rtol=1e-6, atol=1e-9)


@pytest.mark.skipif(cy_impl is None, reason="compiled backend not built")
class TestBackendParity:
    def test_conv_parity(self, rng):
        for d in (1, 2):
            x = rng.normal(size=(3, 5, 12, 10))
            w = rng.normal(size=(7, 5, 3, 3))
            b = rng.normal(size=7)
            a = np_impl.conv2d_forward(x, w, b, d, d, 1)
            c = cy_impl.conv2d_forward(x, w, b, d, d, 1)
            assert np.allclose(a, c, rtol=1e-12, atol=1e-12)
            g = rng.normal(size=a.shape)
            assert np.allclose(
                np_impl.conv2d_backward_input(g, w, d, d, 12, 10, 1),
                cy_impl.conv2d_backward_input(g, w, d, d, 12, 10, 1),
                rtol=1e-12, atol=1e-12,
            )
            gw_a, gb_a = np_impl.conv2d_backward_weight(g, x, 3, 3, d, d, 1)
            gw_c, gb_c = cy_impl.conv2d_backward_weight(g, x, 3, 3, d, d, 1)
            assert np.allclose(gw_a, gw_c, rtol=1e-10, atol=1e-10)
            assert np.allclose(gb_a, gb_c, rtol=1e-10, atol=1e-10)

    def test_pool_parity(self, rng):
        x = rng.normal(size=(2, 4, 10, 8))
        oa, _ = np_impl.maxpool2d_forward(x, 2, 2, 1)
        oc, _ = cy_impl.maxpool2d_forward(x, 2, 2, 1)
        assert np.array_equal(oa, oc)
        a = np_impl.adaptive_avg_pool_forward(x, 3, 5, 1)
        c = cy_impl.adaptive_avg_pool_forward(x, 3, 5, 1)
        assert np.allclose(a, c, rtol=1e-12, atol=1e-14)

    def test_compiled_thread_count_does_not_change_results(self, rng):
        x = rng.normal(size=(4, 6, 16, 16))
        w = rng.normal(size=(8, 6, 3, 3))
        b = rng.normal(size=8)
        one = cy_impl.conv2d_forward(x, w, b, 1, 1, 1)
        four = cy_impl.conv2d_forward(x, w, b, 1, 1, 4)
        assert np.array_equal(one, four)
        g = rng.normal(size=one.shape)
        gw1, gb1 = cy_impl.conv2d_backward_weight(g, x, 3, 3, 1, 1, 1)
        gw4, gb4 = cy_impl.conv2d_backward_weight(g, x, 3, 3, 1, 1, 4)
        assert np.array_equal(gw1, gw4)
        assert np.array_equal(gb1, gb4)


def test_selected_backend_exposes_uniform_api():
    assert K.BACKEND in ("compiled", "numpy")
    x = np.zeros((1, 1, 4, 4))
    out = K.conv2d_forward(x, np.zeros((1, 1, 3, 3)), np.array([2.0]), 1, 1)
    assert np.all(out == 2.0)
