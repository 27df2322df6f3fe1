"""Engine tests: forward oracles, finite-difference gradients, Adam."""
import math
import warnings

import numpy as np
import pytest

from lemo import autodiff as ad
from lemo.autodiff import (Adam, AdamState, Tensor, adam_step, conv2d,
                           deconv2d, leaky_relu, losses, maxpool2d)


# --- independent oracles -----------------------------------------------------

def conv2d_oracle(x, w, b, stride=1, pad=1):
    """Direct cross-correlation by explicit summation (no vectorization)."""
    ci, h, ww = x.shape
    co = w.shape[0]
    xp = np.zeros((ci, h + 2 * pad, ww + 2 * pad))
    xp[:, pad:pad + h, pad:pad + ww] = x
    ho = (xp.shape[1] - 3) // stride + 1
    wo = (xp.shape[2] - 3) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(ci):
                    for a in range(3):
                        for bb in range(3):
                            acc += xp[c, i * stride + a, j * stride + bb] * w[o, c, a, bb]
                out[o, i, j] = acc + b[o]
    return out


def maxpool_oracle(x):
    c, h, w = x.shape
    ho, wo = h // 2, w // 2
    out = np.zeros((c, ho, wo))
    for cc in range(c):
        for i in range(ho):
            for j in range(wo):
                out[cc, i, j] = x[cc, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
    return out


def fd_gradient(f, arrays, i, h=1e-3):
    """Central finite differences of scalar f w.r.t. arrays[i]."""
    a = arrays[i]
    g = np.zeros_like(a, dtype=np.float64)
    it = np.nditer(a, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = a[idx]
        a[idx] = orig + h
        fp = f(arrays)
        a[idx] = orig - h
        fm = f(arrays)
        a[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def ad_gradients(build, arrays):
    """Autodiff gradients of the scalar built by `build` from leaf Tensors."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(leaves)
    out.backward()
    return [lf.grad if lf.grad is not None else np.zeros_like(lf.data)
            for lf in leaves]


def check_grads(build, arrays, h=1e-3, rtol=1e-3):
    """Compare reverse-mode gradients against central differences."""
    gs = ad_gradients(build, arrays)
    for i in range(len(arrays)):
        def scalar(arrs, i=i):
            ts = [Tensor(a.copy()) for a in arrs]
            ts[i] = Tensor(arrs[i].copy(), requires_grad=True)
            return float(build(ts).data)
        gfd = fd_gradient(scalar, [a.copy() for a in arrays], i, h=h)
        num = np.linalg.norm(gs[i] - gfd)
        den = np.linalg.norm(gfd) + 1e-12
        assert num / den < rtol, f"arg {i}: rel err {num / den:.2e}"


# --- conv2d ------------------------------------------------------------------

def test_conv2d_all_ones_against_summation_oracle():
    x = np.ones((1, 3, 3))
    w = np.ones((1, 1, 3, 3))
    b = np.zeros(1)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert out.shape == (1, 3, 3)
    assert out[0, 1, 1] == 9.0
    for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert out[0, i, j] == 4.0
    for i, j in [(0, 1), (1, 0), (1, 2), (2, 1)]:
        assert out[0, i, j] == 6.0
    np.testing.assert_allclose(out, conv2d_oracle(x, w, b), atol=1e-12)


def test_conv2d_random_matches_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, conv2d_oracle(x, w, b), atol=1e-10)
    out2 = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=0).data
    np.testing.assert_allclose(out2, conv2d_oracle(x, w, b, stride=2, pad=0),
                               atol=1e-10)


def test_conv2d_zero_kernel_broadcasts_bias():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 4))
    w = np.zeros((3, 2, 3, 3))
    b = np.array([1.5, -2.0, 0.25])
    out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    for o in range(3):
        np.testing.assert_array_equal(out[o], np.full((4, 4), b[o]))


def test_conv2d_default_velocity_map_extents():
    x = np.zeros((1, 243, 119), dtype=np.float32)
    w = np.zeros((32, 1, 3, 3), dtype=np.float32)
    out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(32, dtype=np.float32)))
    assert out.shape == (32, 243, 119)


def test_conv2d_channel_mismatch_names_axis():
    x = Tensor(np.zeros((2, 4, 4)))
    w = Tensor(np.zeros((3, 5, 3, 3)))
    with pytest.raises(ValueError, match="channel axis"):
        conv2d(x, w)


def test_conv2d_rejects_non_3x3_kernel():
    with pytest.raises(ValueError, match="3x3"):
        conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 5, 5))))


# --- deconv2d ---------------------------------------------------------------

def test_deconv2d_zero_input_broadcasts_bias():
    w = np.random.default_rng(2).normal(size=(3, 2, 3, 3))
    b = np.array([0.5, -1.0])
    out = deconv2d(Tensor(np.zeros((3, 6, 6))), Tensor(w), Tensor(b)).data
    assert out.shape == (2, 6, 6)
    for o in range(2):
        np.testing.assert_array_equal(out[o], np.full((6, 6), b[o]))


def test_deconv2d_stride2_doubles_with_crop():
    # shape arithmetic oracle: raw extent (n-1)*2 + 3 = 2n+1, cropped top-left
    x = Tensor(np.zeros((4, 102, 60), dtype=np.float32))
    w = Tensor(np.zeros((4, 1, 3, 3), dtype=np.float32))
    out = deconv2d(x, w, stride=2, padding=0, out_hw=(205, 120))
    assert out.shape == (1, 205, 120)
    with pytest.raises(ValueError, match="exceeds raw"):
        deconv2d(x, w, stride=2, padding=0, out_hw=(206, 120))


def test_conv_deconv_adjoint_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 8, 8))
    y = rng.normal(size=(5, 8, 8))
    w = rng.normal(size=(5, 3, 3, 3))
    cx = conv2d(Tensor(x), Tensor(w), stride=1, padding=1).data
    dy = deconv2d(Tensor(y), Tensor(w), stride=1, padding=1, out_hw=(8, 8)).data
    assert abs(np.sum(cx * y) - np.sum(x * dy)) < 1e-4


def test_conv_deconv_adjoint_identity_strided():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 9, 9))
    w = rng.normal(size=(4, 2, 3, 3))
    cx = conv2d(Tensor(x), Tensor(w), stride=2, padding=0).data  # (4,4,4)
    y = rng.normal(size=cx.shape)
    dy = deconv2d(Tensor(y), Tensor(w), stride=2, padding=0, out_hw=(9, 9)).data
    assert abs(np.sum(cx * y) - np.sum(x * dy)) < 1e-4


# --- maxpool2d ---------------------------------------------------------------

def test_maxpool_single_window():
    out, idx = maxpool2d(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
    assert out.data.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 4.0
    assert idx[0, 0, 0] == 3


def test_maxpool_constant_halves_extents():
    out, _ = maxpool2d(Tensor(np.full((2, 6, 10), 7.0)))
    assert out.shape == (2, 3, 5)
    assert np.all(out.data == 7.0)


def test_maxpool_floor_semantics():
    out, _ = maxpool2d(Tensor(np.zeros((1, 205, 120))))
    assert out.shape == (1, 102, 60)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 5, 7))
    out, _ = maxpool2d(Tensor(x))
    np.testing.assert_allclose(out.data, maxpool_oracle(x), atol=1e-12)


def test_maxpool_tie_takes_earlier_index():
    x = np.array([[[2.0, 2.0], [2.0, 2.0]]])
    _, idx = maxpool2d(Tensor(x))
    assert idx[0, 0, 0] == 0


# --- leaky_relu ---------------------------------------------------------------

def test_leaky_relu_values_and_gradient():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    y = leaky_relu(x, slope=0.01)
    np.testing.assert_allclose(y.data, [-0.01, 2.0])
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [0.01, 1.0])
    with pytest.raises(ValueError):
        leaky_relu(x, slope=1.5)


# --- losses ---------------------------------------------------------------------

def test_losses_l1_identity_is_zero():
    x = np.random.default_rng(6).normal(size=(4, 5))
    assert float(losses(Tensor(x), x, "l1").data) == 0.0


def test_losses_bce_half_is_ln2():
    out = float(losses(Tensor(np.array(0.5)), np.array(1.0), "bce").data)
    assert abs(out - math.log(2.0)) < 1e-12


def test_losses_bce_rejects_non_binary_targets():
    with pytest.raises(ValueError, match="binary"):
        losses(Tensor(np.array(0.5)), np.array(0.3), "bce")


def test_losses_all_zero_mask_warns_and_is_zero():
    x = Tensor(np.ones((3, 3)), requires_grad=True)
    with pytest.warns(RuntimeWarning):
        out = losses(x, np.zeros((3, 3)), "l1", mask=np.zeros((3, 3)))
    assert float(out.data) == 0.0


def test_losses_masked_gradient_zero_at_masked_positions():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    tgt = rng.normal(size=(4, 4))
    mask = (rng.random((4, 4)) > 0.5).astype(float)
    losses(x, tgt, "l1", mask=mask).backward()
    assert np.all(x.grad[mask == 0] == 0.0)
    assert np.any(x.grad[mask == 1] != 0.0)


def test_losses_mse_value():
    out = losses(Tensor(np.array([1.0, 3.0])), np.array([0.0, 1.0]), "mse")
    assert float(out.data) == pytest.approx(2.5)


# --- reverse-mode gradients -----------------------------------------------------

def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert float(x.grad) == pytest.approx(6.0)


def test_conv2d_gradient_vs_finite_differences():
    # spec-pinned tolerance: rel err < 1e-4 at h = 1e-3 on 1x4x4 input
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 4, 4))
    w = rng.normal(size=(2, 1, 3, 3))
    b = rng.normal(size=2)
    k = rng.normal(size=(2, 4, 4))  # fixed probe makes the scalar sensitive

    def build(ts):
        return (conv2d(ts[0], ts[1], ts[2]) * k).sum()

    check_grads(build, [x, w, b], h=1e-3, rtol=1e-4)


def test_gradient_suite_all_ops():
    """Every supported op vs central differences, extents <= 8."""
    rng = np.random.default_rng(9)

    def probe(shape):
        return rng.normal(size=shape)

    cases = []
    a, b = probe((3, 4)), probe((3, 4))
    k = probe((3, 4))
    cases.append((lambda t: ((t[0] + t[1]) * k).sum(), [a, b]))
    cases.append((lambda t: ((t[0] - t[1]) * k).sum(), [a, b]))
    cases.append((lambda t: (t[0] * t[1] * k).sum(), [a, b]))
    cases.append((lambda t: ((t[0] / (t[1] * t[1] + 1.0)) * k).sum(), [a, b]))
    cases.append((lambda t: ((-t[0]) * k).sum(), [a]))
    cases.append((lambda t: ((t[0] ** 3) * k).sum(), [a]))
    m1, m2 = probe((4, 5)), probe((5, 3))
    km = probe((4, 3))
    cases.append((lambda t: ((t[0] @ t[1]) * km).sum(), [m1, m2]))
    bm1, bm2 = probe((2, 3, 4)), probe((2, 4, 2))
    kbm = probe((2, 3, 2))
    cases.append((lambda t: ((t[0] @ t[1]) * kbm).sum(), [bm1, bm2]))
    cases.append((lambda t: (t[0].exp() * k).sum(), [a * 0.3]))
    cases.append((lambda t: (t[0].log() * k).sum(), [np.abs(a) + 1.0]))
    cases.append((lambda t: (t[0].sqrt() * k).sum(), [np.abs(a) + 1.0]))
    cases.append((lambda t: (t[0].sin() * k).sum(), [a]))
    cases.append((lambda t: (t[0].cos() * k).sum(), [a]))
    cases.append((lambda t: (t[0].abs() * k).sum(), [a + np.sign(a)]))
    cases.append((lambda t: (t[0].sigmoid() * k).sum(), [a]))
    cases.append((lambda t: (ad.maximum(t[0], t[1]) * k).sum(),
                  [a, a + np.sign(probe((3, 4))) * 0.5]))
    cases.append((lambda t: (ad.minimum(t[0], 0.7) * k).sum(),
                  [a + np.sign(a) * 0.3]))
    cond = probe((3, 4)) > 0
    cases.append((lambda t: (ad.where(cond, t[0], t[1]) * k).sum(), [a, b]))
    kcat = probe((3, 8))
    cases.append((lambda t: (ad.concatenate([t[0], t[1]], axis=1)
                             * kcat).sum(), [a, b]))
    kstk = probe((2, 3, 4))
    cases.append((lambda t: (ad.stack([t[0], t[1]], axis=0) * kstk).sum(),
                  [a, b]))
    k43 = probe((4, 3))
    cases.append((lambda t: (t[0].reshape(4, 3) * k43).sum(), [a]))
    cases.append((lambda t: (t[0].transpose(1, 0) * k43).sum(), [a]))
    k22 = probe((2, 2))
    cases.append((lambda t: (t[0][1:, ::2] * k22).sum(), [a]))
    idx = np.array([0, 2, 2, 1])
    k44 = probe((4, 4))
    cases.append((lambda t: (t[0][idx] * k44).sum(), [a]))
    k4 = probe((4,))
    cases.append((lambda t: (t[0].sum(axis=0) * k4).sum(), [a]))
    k31 = probe((3, 1))
    cases.append((lambda t: (t[0].mean(axis=1, keepdims=True) * k31).sum(),
                  [a]))
    cases.append((lambda t: (t[0].clip(-0.5, 0.5) * k).sum(),
                  [a + np.sign(a) * 0.6]))
    cx = probe((2, 6, 5))
    cw = probe((3, 2, 3, 3))
    cb = probe(3)
    ck = probe((3, 6, 5))
    cases.append((lambda t: (conv2d(t[0], t[1], t[2]) * ck).sum(),
                  [cx, cw, cb]))
    dk = probe((2, 8, 8))
    dw = probe((3, 2, 3, 3))
    dx = probe((3, 4, 4))
    cases.append((lambda t: (deconv2d(t[0], t[1], stride=2, padding=0,
                                      out_hw=(8, 8)) * dk).sum(), [dx, dw]))
    px = probe((2, 6, 6))  # distinct values, ties have measure zero
    pk = probe((2, 3, 3))
    cases.append((lambda t: (maxpool2d(t[0])[0] * pk).sum(), [px]))
    lk = probe((3, 4))
    cases.append((lambda t: (leaky_relu(t[0]) * lk).sum(),
                  [a + np.sign(a) * 0.2]))
    cases.append((lambda t: losses(t[0], b, "l1", mask=(k > 0)), [a + 0.1]))
    cases.append((lambda t: losses(t[0], b, "mse"), [a]))
    cases.append((lambda t: losses(t[0].sigmoid(), (b > 0).astype(float),
                                   "bce"), [a]))

    for n, (build, arrays) in enumerate(cases):
        check_grads(build, arrays, h=1e-3, rtol=1e-3)


def test_disconnected_parameter_gets_zero_gradient():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    unused = Tensor(np.array([5.0]), requires_grad=True)
    (x * x).sum().backward()
    assert unused.grad is None  # never touched
    opt = Adam([x, unused], lr=0.1)
    before = unused.data.copy()
    opt.step()
    np.testing.assert_array_equal(unused.data, before)


def test_forward_purity_and_finiteness():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    old = ad.CHECK_FINITE
    ad.CHECK_FINITE = True
    try:
        o1 = conv2d(Tensor(x), Tensor(w)).data
        o2 = conv2d(Tensor(x), Tensor(w)).data
    finally:
        ad.CHECK_FINITE = old
    np.testing.assert_array_equal(o1, o2)


# --- adam ------------------------------------------------------------------------

def test_adam_first_step_closed_form():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState([p.data.shape], lr=1e-4)
    adam_step([p], [np.array([1.0])], state)
    # mhat = vhat = 1 on the first step, so the update is -lr/(1+eps)
    expected = 1.0 - 1e-4 / (1.0 + 1e-8)
    assert p.data[0] == pytest.approx(expected, abs=1e-15)
    assert abs((p.data[0] - 1.0) + 1e-4) < 1e-9


def test_adam_zero_gradient_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState([p.data.shape])
    adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_rejects_nan_gradient_and_keeps_state():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState([p.data.shape])
    adam_step([p], [np.array([0.5])], state)
    m_before = state.m[0].copy()
    with pytest.raises(FloatingPointError):
        adam_step([p], [np.array([np.nan])], state)
    assert state.step_count == 1
    np.testing.assert_array_equal(state.m[0], m_before)


def test_adam_training_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(1, 4, 4)).astype(np.float32))
        w = Tensor(rng.normal(size=(2, 1, 3, 3)).astype(np.float32),
                   requires_grad=True)
        b = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
        opt = Adam([w, b], lr=1e-3)
        for _ in range(5):
            opt.zero_grad()
            losses(conv2d(x, w, b), np.ones((2, 4, 4)), "mse").backward()
            opt.step()
        return w.data.copy(), b.data.copy()

    w1, b1 = run()
    w2, b2 = run()
    np.testing.assert_array_equal(w1, w2)
    np.testing.assert_array_equal(b1, b2)
