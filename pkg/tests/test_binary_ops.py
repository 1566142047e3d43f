import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import naive_conv2d
from groupbnn import binary_ops as bo
from groupbnn.tensor_core import BitTensor, pack_bool, sign_binarize, unpack


def random_case(rng, max_cg=70, max_hw=7):
    g = int(rng.choice([1, 2, 3, 4]))
    cg = int(rng.integers(1, max_cg))
    og = int(rng.integers(1, 4))
    k = int(rng.choice([1, 2, 3]))
    s = int(rng.choice([1, 2]))
    p = int(rng.integers(0, k))
    h = int(rng.integers(k, max_hw + 1))
    w = int(rng.integers(k, max_hw + 1))
    geom = bo.ConvGeometry(g * cg, g * og, k, s, p, g)
    x = sign_binarize(rng.standard_normal((int(rng.integers(1, 3)), g * cg, h, w)).astype(np.float32))
    wt = sign_binarize(rng.standard_normal(geom.weight_shape).astype(np.float32))
    return geom, x, wt


# --- geometry ---------------------------------------------------------------------------------


def test_geometry_validation():
    with pytest.raises(ValueError):
        bo.ConvGeometry(6, 4, groups=4)
    with pytest.raises(ValueError):
        bo.ConvGeometry(4, 4, kernel=0)
    with pytest.raises(ValueError):
        bo.ConvGeometry(4, 4, padding=-1)
    g = bo.ConvGeometry(6, 9, kernel=3, stride=2, padding=1, groups=3)
    assert g.weight_shape == (9, 2, 3, 3)
    assert g.output_hw(7, 8) == (4, 4)


# --- scaling factor ------------------------------------------------------------------------------


def test_scaling_factor_examples():
    assert bo.scaling_factor(np.array([[1.0, -2.0, 3.0]]))[0] == pytest.approx(2.0)
    assert bo.scaling_factor(np.full((1, 2, 3, 3), 0.7))[0] == pytest.approx(0.7)
    assert bo.scaling_factor(np.zeros((2, 4)))[1] == 0.0


def _objective(w, a):
    return float(np.sum((w - a * np.where(w >= 0, 1.0, -1.0)) ** 2))


def test_scaling_factor_matches_ternary_search(rng):
    for _ in range(20):
        w = rng.standard_normal((3, 3, 4)).astype(np.float64)
        lo, hi = 0.0, float(np.abs(w).max())
        for _ in range(200):
            m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
            if _objective(w, m1) < _objective(w, m2):
                hi = m2
            else:
                lo = m1
        alpha = float(bo.scaling_factor(w[None])[0])
        assert abs(alpha - (lo + hi) / 2) <= 1e-6 * np.abs(w).max()


# --- xnor dot ------------------------------------------------------------------------------------


def test_xnor_dot_examples():
    a = pack_bool(np.ones(9, bool))
    assert bo.xnor_popcount_dot(a, a, 9) == 9
    assert bo.xnor_popcount_dot(a, pack_bool(np.zeros(9, bool)), 9) == -9


@given(st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_xnor_dot_matches_naive(n, seed):
    r = np.random.default_rng(seed)
    a, b = r.random(n) < 0.5, r.random(n) < 0.5
    naive = int(np.sum(np.where(a, 1, -1) * np.where(b, 1, -1)))
    assert bo.xnor_popcount_dot(pack_bool(a), pack_bool(b), n) == naive


def test_xnor_dot_ignores_garbage_padding():
    a = np.array([0b111], dtype=np.uint64)
    b = np.array([0b111 | (1 << 40)], dtype=np.uint64)
    assert bo.xnor_popcount_dot(a, b, 3) == 3


def test_xnor_dot_length_contract():
    with pytest.raises(AssertionError):
        bo.xnor_popcount_dot(pack_bool(np.ones(70, bool)), pack_bool(np.ones(10, bool)), 70)


# --- binary conv ----------------------------------------------------------------------------------


def test_all_plus_one_gives_nine(backend):
    geom = bo.ConvGeometry(1, 1, 3, 1, 1, 1)
    x = BitTensor.from_bool(np.ones((1, 1, 5, 5), bool))
    w = BitTensor.from_bool(np.ones((1, 1, 3, 3), bool))
    out = bo.binary_group_conv2d(x, w, geom, backend=backend)
    assert np.all(out[0, 0, 1:-1, 1:-1] == 9)
    assert out[0, 0, 0, 0] == 4  # corner sees 4 valid taps


def test_matches_naive_loops(rng, backend):
    for _ in range(25):
        geom, x, w = random_case(rng, max_cg=9, max_hw=6)
        ref = naive_conv2d(unpack(x), unpack(w), geom.stride, geom.padding, geom.groups)
        out = bo.binary_group_conv2d(x, w, geom, backend=backend)
        np.testing.assert_array_equal(out, ref)


def test_matches_float_conv_exactly(rng, backend):
    for _ in range(150):
        geom, x, w = random_case(rng)
        ref = bo.float_group_conv2d(unpack(x), unpack(w), geom)
        counts = bo.binary_group_conv2d(x, w, geom, backend=backend)
        np.testing.assert_array_equal(counts, ref)
        assert np.all(counts == np.round(counts))


def test_scale_applied_per_filter(rng, backend):
    geom, x, w = random_case(rng)
    scale = rng.random(geom.out_channels).astype(np.float32) + 0.1
    plain = bo.binary_group_conv2d(x, w, geom, backend=backend)
    scaled = bo.binary_group_conv2d(x, w, geom, scale, backend=backend)
    np.testing.assert_allclose(scaled, plain * scale[None, :, None, None], rtol=1e-6)


def test_backends_agree(rng):
    backends = bo.available_backends()
    for _ in range(40):
        geom, x, w = random_case(rng)
        outs = [bo.binary_group_conv2d(x, w, geom, backend=b) for b in backends.values()]
        for o in outs[1:]:
            np.testing.assert_array_equal(o, outs[0])


def test_depthwise_range(rng, backend):
    c = 16
    geom = bo.ConvGeometry(c, c, 3, 1, 1, c)
    x = sign_binarize(rng.standard_normal((4, c, 6, 6)).astype(np.float32))
    w = sign_binarize(rng.standard_normal(geom.weight_shape).astype(np.float32))
    out = bo.binary_group_conv2d(x, w, geom, backend=backend)
    assert out.min() >= -9 and out.max() <= 9


def test_shape_errors():
    geom = bo.ConvGeometry(4, 4, 3, 1, 1, 2)
    x = BitTensor.from_bool(np.ones((1, 3, 5, 5), bool))
    w = BitTensor.from_bool(np.ones(geom.weight_shape, bool))
    with pytest.raises(ValueError):
        bo.binary_group_conv2d(x, w, geom)
    x = BitTensor.from_bool(np.ones((1, 4, 5, 5), bool))
    with pytest.raises(ValueError):
        bo.binary_group_conv2d(x, w, geom, scale=np.ones(3))


# --- float conv -----------------------------------------------------------------------------------


def test_float_conv_1x1_is_matmul(rng):
    x = rng.standard_normal((2, 5, 3, 4)).astype(np.float32)
    w = rng.standard_normal((7, 5, 1, 1)).astype(np.float32)
    out = bo.float_group_conv2d(x, w, bo.ConvGeometry(5, 7, 1))
    ref = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_float_conv_depthwise_identity(rng):
    x = rng.standard_normal((2, 6, 4, 4)).astype(np.float32)
    out = bo.float_group_conv2d(x, np.ones((6, 1, 1, 1), np.float32), bo.ConvGeometry(6, 6, 1, groups=6))
    np.testing.assert_array_equal(out, x)


def test_float_conv_ignores_cross_group_inputs(rng):
    geom = bo.ConvGeometry(4, 4, 3, 1, 1, 2)
    x = rng.standard_normal((2, 4, 5, 5)).astype(np.float32)
    w = rng.standard_normal(geom.weight_shape).astype(np.float32)
    out = bo.float_group_conv2d(x, w, geom)
    # block-diagonal masked full conv
    full = np.zeros((4, 4, 3, 3), np.float32)
    full[:2, :2], full[2:, 2:] = w[:2], w[2:]
    np.testing.assert_allclose(out, bo.float_group_conv2d(x, full, bo.ConvGeometry(4, 4, 3, 1, 1)),
                               atol=1e-5)
    # zeroing the other group's inputs leaves group 0 outputs unchanged
    x2 = x.copy()
    x2[:, 2:] = 0
    np.testing.assert_array_equal(bo.float_group_conv2d(x2, w, geom)[:, :2], out[:, :2])


def test_float_conv_matches_naive(rng, backend, monkeypatch):
    monkeypatch.setattr(bo, "kernel", backend)
    for _ in range(15):
        geom, x, w = random_case(rng, max_cg=5, max_hw=6)
        xf = rng.standard_normal(unpack(x).shape).astype(np.float32)
        wf = rng.standard_normal(geom.weight_shape).astype(np.float32)
        np.testing.assert_allclose(bo.float_group_conv2d(xf, wf, geom),
                                   naive_conv2d(xf, wf, geom.stride, geom.padding, geom.groups),
                                   rtol=1e-4, atol=1e-4)


def test_float_conv_backward_finite_differences(rng, backend, monkeypatch):
    monkeypatch.setattr(bo, "kernel", backend)
    for _ in range(6):
        geom, x, w = random_case(rng, max_cg=3, max_hw=5)
        xf = rng.standard_normal(unpack(x).shape)
        wf = rng.standard_normal(geom.weight_shape)
        y, cols = bo.float_group_conv2d(xf, wf, geom, return_cols=True)
        gy = rng.standard_normal(y.shape).astype(np.float32)
        dx, dw = bo.float_group_conv2d_backward(gy, xf.shape, wf.astype(np.float32), geom, cols)

        def loss(xv, wv):
            return float(np.sum(naive_conv2d(xv, wv, geom.stride, geom.padding, geom.groups) * gy))

        h = 1e-3
        for _ in range(4):
            i = tuple(rng.integers(0, s) for s in xf.shape)
            xp, xm = xf.copy(), xf.copy()
            xp[i] += h
            xm[i] -= h
            assert dx[i] == pytest.approx((loss(xp, wf) - loss(xm, wf)) / (2 * h), rel=1e-3, abs=1e-3)
            j = tuple(rng.integers(0, s) for s in wf.shape)
            wp, wm = wf.copy(), wf.copy()
            wp[j] += h
            wm[j] -= h
            assert dw[j] == pytest.approx((loss(xf, wp) - loss(xf, wm)) / (2 * h), rel=1e-3, abs=1e-3)


def test_im2col_col2im_backends_bit_equal(rng):
    backends = list(bo.available_backends().values())
    if len(backends) < 2:
        pytest.skip("compiled kernels not built")
    a, b = backends
    for _ in range(100):
        g = int(rng.choice([1, 2, 3]))
        c, n = g * int(rng.integers(1, 5)), int(rng.integers(1, 4))
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        sh, sw = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        ph, pw = int(rng.integers(0, kh)), int(rng.integers(0, kw))
        h, w = int(rng.integers(kh, 9)), int(rng.integers(kw, 9))
        ho, wo = (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        args = (g, kh, kw, sh, sw, ph, pw, ho, wo)
        cols = a.im2col(x, *args)
        np.testing.assert_array_equal(cols, b.im2col(x, *args))
        d = rng.standard_normal(cols.shape).astype(np.float32)
        back = (n, c, h, w, kh, kw, sh, sw, ph, pw, ho, wo)
        np.testing.assert_array_equal(a.col2im(d, *back), b.col2im(d, *back))


def test_pure_python_fallback_selected_by_env():
    import subprocess
    import sys
    code = "import groupbnn.binary_ops as b; print(b.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={"GROUPBNN_PURE_PYTHON": "1", "PATH": ""}, check=True)
    assert out.stdout.strip() == "numpy"


def test_float_conv_matches_torch(rng):
    torch = pytest.importorskip("torch")
    for _ in range(20):
        geom, x, w = random_case(rng, max_cg=6, max_hw=9)
        xf = rng.standard_normal(unpack(x).shape).astype(np.float32)
        wf = rng.standard_normal(geom.weight_shape).astype(np.float32)
        ref = torch.nn.functional.conv2d(torch.from_numpy(xf), torch.from_numpy(wf), stride=geom.stride,
                                         padding=geom.padding, groups=geom.groups).numpy()
        np.testing.assert_allclose(bo.float_group_conv2d(xf, wf, geom), ref, rtol=1e-4, atol=1e-4)
