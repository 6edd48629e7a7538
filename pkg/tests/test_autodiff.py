import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convcs import autodiff as ad
from convcs.autodiff import Parameter
from convcs.errors import ConfigError, ContractError, DimensionError, GeometryError

from oracles import central_difference, naive_conv2d, naive_deconv2d


def rand(rng, *shape):
    return rng.standard_normal(shape)


# -- conv2d ------------------------------------------------------------------


def test_conv2d_all_ones_kernel():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    out = ad.conv2d(x, np.ones((1, 1, 2, 2)), np.zeros(1))
    np.testing.assert_array_equal(out.data, [[[[10.0]]]])


def test_conv2d_zero_kernel_gives_zeros_of_formula_shape():
    x = np.random.default_rng(0).random((2, 3, 9, 7))
    out = ad.conv2d(x, np.zeros((4, 3, 3, 3)), np.zeros(4), stride=2, pad=1)
    assert out.shape == (2, 4, 5, 4)
    assert not out.data.any()


def test_conv2d_identity_kernel():
    x = np.random.default_rng(1).random((1, 1, 5, 6))
    out = ad.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("n,cin,cout,h,w,k,s,p", [
    (1, 1, 1, 5, 5, 3, 1, 1),
    (2, 3, 2, 7, 9, 3, 2, 1),
    (1, 2, 3, 8, 8, 4, 2, 1),
    (1, 1, 3, 16, 16, 8, 4, 2),
    (1, 1, 2, 12, 12, 6, 6, 0),
])
def test_conv2d_matches_naive_loops(n, cin, cout, h, w, k, s, p):
    rng = np.random.default_rng(h * 7 + k)
    x, wt, b = rand(rng, n, cin, h, w), rand(rng, cout, cin, k, k), rand(rng, cout)
    np.testing.assert_allclose(ad.conv2d(x, wt, b, s, p).data, naive_conv2d(x, wt, b, s, p),
                               rtol=1e-12, atol=1e-12)


def test_conv2d_large_kernel_path_matches_naive():
    rng = np.random.default_rng(3)
    x, wt = rand(rng, 1, 1, 32, 32), rand(rng, 3, 1, 8, 8)
    # 8x8 = 64 taps goes through the window path
    np.testing.assert_allclose(ad.conv2d(x, wt, None, 4, 2).data, naive_conv2d(x, wt, None, 4, 2),
                               rtol=1e-12, atol=1e-12)


def test_conv2d_channel_mismatch_names_axis():
    with pytest.raises(DimensionError, match="channel"):
        ad.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(GeometryError, match="exceeds"):
        ad.conv2d(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 5, 5)))


def test_conv2d_stride_not_dividing():
    with pytest.raises(GeometryError, match="divisible"):
        ad.conv2d(np.zeros((1, 1, 6, 6)), np.zeros((1, 1, 3, 3)), stride=2)


# -- deconv2d ----------------------------------------------------------------


def test_deconv2d_shape_formula():
    out = ad.deconv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)), stride=2)
    assert out.shape == (1, 1, 8, 8)


def test_deconv2d_scatter_example():
    w = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    out = ad.deconv2d(np.full((1, 1, 1, 1), 2.0), w, np.zeros(1))
    np.testing.assert_array_equal(out.data[0, 0], [[2.0, 4.0], [6.0, 8.0]])


def test_deconv2d_zero_kernel():
    out = ad.deconv2d(np.ones((1, 2, 3, 3)), np.zeros((2, 1, 4, 4)), stride=2, pad=1)
    assert not out.data.any()


@pytest.mark.parametrize("n,cin,cout,h,k,s,p", [
    (1, 1, 1, 3, 3, 1, 1),
    (2, 3, 2, 4, 4, 2, 1),
    (1, 2, 1, 3, 8, 4, 2),
    (1, 26, 1, 2, 32, 16, 8),
])
def test_deconv2d_matches_scatter_oracle(n, cin, cout, h, k, s, p):
    rng = np.random.default_rng(k + h)
    x, wt, b = rand(rng, n, cin, h, h), rand(rng, cin, cout, k, k), rand(rng, cout)
    np.testing.assert_allclose(ad.deconv2d(x, wt, b, s, p).data, naive_deconv2d(x, wt, b, s, p),
                               rtol=1e-12, atol=1e-11)


def test_deconv2d_non_positive_output():
    with pytest.raises(GeometryError):
        ad.deconv2d(np.ones((1, 1, 1, 1)), np.ones((1, 1, 2, 2)), pad=1)


# -- elementwise / residual / loss ------------------------------------------


def test_relu_examples():
    x = np.array([-1.0, 0.0, 3.0]).reshape(1, 1, 1, 3)
    np.testing.assert_array_equal(ad.relu(x).data.ravel(), [0.0, 0.0, 3.0])
    assert not ad.relu(-np.ones((1, 1, 2, 2))).data.any()
    pos = np.arange(1.0, 5.0).reshape(1, 1, 2, 2)
    np.testing.assert_array_equal(ad.relu(pos).data, pos)


def test_residual_block_zero_weights_is_identity():
    x = np.random.default_rng(0).random((1, 4, 6, 5))
    z, zb = np.zeros((4, 4, 3, 3)), np.zeros(4)
    np.testing.assert_array_equal(ad.residual_block(x, z, zb, z, zb).data, x)


def test_residual_block_hand_value():
    # 3x3 kernels that only carry a centre tap reduce to 1x1 kernels
    w1 = np.zeros((1, 1, 3, 3))
    w1[0, 0, 1, 1] = 2.0
    w2 = np.zeros((1, 1, 3, 3))
    w2[0, 0, 1, 1] = 3.0
    out = ad.residual_block(np.ones((1, 1, 1, 1)), w1, np.zeros(1), w2, np.zeros(1))
    assert out.data.item() == 7.0


def test_residual_block_preserves_shape():
    rng = np.random.default_rng(2)
    x = rng.random((1, 3, 7, 11))
    w = rng.standard_normal((3, 3, 3, 3))
    assert ad.residual_block(x, w, np.zeros(3), w, np.zeros(3)).shape == (1, 3, 7, 11)


def test_residual_block_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.residual_block(np.zeros((1, 2, 4, 4)), np.zeros((3, 3, 3, 3)), np.zeros(3),
                          np.zeros((2, 3, 3, 3)), np.zeros(2))


def test_mse_examples():
    a = np.array([1.0, 2.0]).reshape(1, 1, 1, 2)
    assert ad.mse_loss(a, a).item() == 0.0
    assert ad.mse_loss(a, np.zeros_like(a)).item() == 2.5
    assert ad.mse_loss(2 * a, np.zeros_like(a)).item() == 10.0


def test_mse_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.mse_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


# -- backprop ------------------------------------------------------------------


def test_backprop_same_parameter_both_sides_is_zero():
    x = Parameter(np.random.default_rng(0).random((1, 1, 3, 3)))
    ad.backprop(ad.mse_loss(x, x))
    assert not x.grad.any()


def test_backprop_hand_chain_rule():
    w = Parameter(np.full((1, 1, 1, 1), 2.0))
    y = ad.relu(ad.mul(w, np.full((1, 1, 1, 1), 3.0)))
    ad.backprop(ad.mse_loss(y, np.zeros((1, 1, 1, 1))))
    assert w.grad.item() == 36.0


def test_backprop_accumulates_across_calls_and_uses():
    w = Parameter(np.full((1, 1, 1, 1), 2.0))
    x = np.full((1, 1, 1, 1), 3.0)
    loss = lambda: ad.mse_loss(ad.add(ad.mul(w, x), ad.mul(w, x)), np.zeros_like(x))
    ad.backprop(loss())
    # loss = (2wx)^2, d/dw = 8 w x^2 = 144
    assert w.grad.item() == 144.0
    ad.backprop(loss())
    assert w.grad.item() == 288.0
    w.zero_grad()
    assert not w.grad.any()


def test_backprop_rejects_non_scalar():
    w = Parameter(np.ones((1, 1, 2, 2)))
    with pytest.raises(ContractError):
        ad.backprop(ad.relu(w))


def _two_layer(rng):
    p = {
        "w1": Parameter(rand(rng, 3, 1, 4, 4), "w1"),
        "b1": Parameter(rand(rng, 3), "b1"),
        "w2": Parameter(rand(rng, 3, 1, 4, 4), "w2"),
        "b2": Parameter(rand(rng, 1), "b2"),
    }
    x = rand(rng, 2, 1, 6, 6)
    target = rand(rng, 2, 1, 6, 6)

    def loss():
        h = ad.relu(ad.conv2d(x, p["w1"], p["b1"], stride=2, pad=1))
        return ad.mse_loss(ad.deconv2d(h, p["w2"], p["b2"], stride=2, pad=1), target)

    return p, loss


def test_backprop_two_layer_net_matches_finite_differences():
    p, loss = _two_layer(np.random.default_rng(11))
    ad.backprop(loss())
    for param in p.values():
        numeric = central_difference(lambda: loss().item(), param.data)
        err = np.abs(param.grad - numeric) / np.maximum(np.maximum(np.abs(param.grad), np.abs(numeric)), 1e-12)
        assert err.max() < 1e-6, param.name


OPS = {
    "conv2d": lambda x, w: ad.conv2d(x, w, None, 2, 1),
    "deconv2d": lambda x, w: ad.deconv2d(x, w, None, 2, 1),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(5)
    x = Parameter(rand(rng, 2, 2, 5, 5) if name == "conv2d" else rand(rng, 2, 2, 3, 3), "x")
    w = Parameter(rand(rng, 3, 2, 3, 3) if name == "conv2d" else rand(rng, 2, 3, 4, 4), "w")
    probe = OPS[name](x.data, w.data)
    target = rand(rng, *probe.shape)
    loss = lambda: ad.mse_loss(OPS[name](x, w), target)
    ad.backprop(loss())
    for param in (x, w):
        numeric = central_difference(lambda: loss().item(), param.data)
        np.testing.assert_allclose(param.grad, numeric, rtol=1e-6, atol=1e-9)


def test_structural_op_gradients():
    rng = np.random.default_rng(6)
    a = Parameter(rand(rng, 4, 6), "a")
    b = Parameter(rand(rng, 6, 9), "b")
    target = rand(rng, 1, 3, 2, 3)

    def loss():
        m = ad.matmul(a, b)  # 4x9
        img = ad.reshape(m, (1, 4, 3, 3))
        img = ad.transpose(img, (0, 2, 3, 1))  # 1x3x3x4
        img = ad.crop(img, 1, 0, 2, 4)  # crop axes 2/3 -> (1,3,2,4)
        img = ad.relu(ad.crop(img, 0, 1, 2, 3))
        return ad.mse_loss(ad.reshape(img, (1, 3, 2, 3)), target)

    ad.backprop(loss())
    for param in (a, b):
        numeric = central_difference(lambda: loss().item(), param.data)
        np.testing.assert_allclose(param.grad, numeric, rtol=1e-6, atol=1e-9)


# -- algebraic properties -------------------------------------------------------

geometry = st.tuples(
    st.integers(1, 3),  # cin
    st.integers(1, 3),  # cout
    st.sampled_from([(3, 1, 1), (3, 2, 1), (4, 2, 1), (2, 2, 0), (6, 4, 1), (5, 1, 2)]),
    st.integers(2, 5),  # output spatial size of the conv
    st.integers(0, 2**32 - 1),
)


def _conv_geometry(out_size, k, s, p):
    return (out_size - 1) * s + k - 2 * p


@settings(max_examples=60, deadline=None)
@given(geometry)
def test_conv_deconv_adjoint(g):
    cin, cout, (k, s, p), out_size, seed = g
    h = _conv_geometry(out_size, k, s, p)
    rng = np.random.default_rng(seed)
    x, w, y = rand(rng, 2, cin, h, h), rand(rng, cout, cin, k, k), rand(rng, 2, cout, out_size, out_size)
    lhs = np.vdot(ad.conv2d(x, w, None, s, p).data, y)
    rhs = np.vdot(x, ad.deconv2d(y, w, None, s, p).data)
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs), 1.0)


@settings(max_examples=40, deadline=None)
@given(geometry, st.floats(-3, 3), st.floats(-3, 3))
def test_conv_and_deconv_linear(g, alpha, beta):
    cin, cout, (k, s, p), out_size, seed = g
    h = _conv_geometry(out_size, k, s, p)
    rng = np.random.default_rng(seed)
    w = rand(rng, cout, cin, k, k)
    x1, x2 = rand(rng, 1, cin, h, h), rand(rng, 1, cin, h, h)
    lhs = ad.conv2d(alpha * x1 + beta * x2, w, None, s, p).data
    rhs = alpha * ad.conv2d(x1, w, None, s, p).data + beta * ad.conv2d(x2, w, None, s, p).data
    assert np.abs(lhs - rhs).max() <= 1e-12 * max(np.abs(lhs).max(), 1.0) * 10
    y1, y2 = rand(rng, 1, cout, out_size, out_size), rand(rng, 1, cout, out_size, out_size)
    lhs = ad.deconv2d(alpha * y1 + beta * y2, w, None, s, p).data
    rhs = alpha * ad.deconv2d(y1, w, None, s, p).data + beta * ad.deconv2d(y2, w, None, s, p).data
    assert np.abs(lhs - rhs).max() <= 1e-12 * max(np.abs(lhs).max(), 1.0) * 10


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([(3, 1, 1), (4, 2, 1), (32, 16, 8), (8, 4, 2)]), st.integers(1, 4))
def test_conv_then_deconv_restores_spatial_size(ksp, blocks):
    k, s, p = ksp
    h = blocks * s + k - 2 * p - s
    if h + 2 * p < k:
        return
    x = np.zeros((1, 1, h, h + s))
    y = ad.conv2d(x, np.zeros((2, 1, k, k)), None, s, p)
    assert ad.deconv2d(y, np.zeros((2, 1, k, k)), None, s, p).shape == x.shape


def test_determinism_bit_identical():
    rng = np.random.default_rng(9)
    x, w = rand(rng, 2, 3, 12, 12), rand(rng, 4, 3, 3, 3)
    a = ad.conv2d(x, w, None, 1, 1).data
    b = ad.conv2d(x.copy(), w.copy(), None, 1, 1).data
    assert a.tobytes() == b.tobytes()


# -- Adam ----------------------------------------------------------------------


def test_adam_first_step_hand_value():
    p = Parameter(np.zeros(1))
    opt = ad.Adam([p], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
    p.grad[:] = 1.0
    opt.step()
    # m_hat = v_hat = 1 after bias correction
    expected = -1e-3 * 1.0 / (np.sqrt(1.0) + 1e-8)
    assert p.data[0] == pytest.approx(expected, rel=1e-15)
    assert p.data[0] == pytest.approx(-9.99999995e-4, rel=1e-8)


def test_adam_zero_gradient_no_move():
    p = Parameter(np.full(3, 0.5))
    opt = ad.Adam([p])
    opt.step()
    np.testing.assert_array_equal(p.data, 0.5)


def test_adam_constant_gradient_step_tends_to_lr():
    p = Parameter(np.zeros(1))
    opt = ad.Adam([p], lr=1e-2)
    prev = 0.0
    for _ in range(3000):
        p.grad[:] = 0.37
        opt.step()
        step = p.data[0] - prev
        prev = p.data[0]
    assert abs(step) == pytest.approx(1e-2, rel=1e-6)


def test_adam_rejects_non_positive_lr():
    with pytest.raises(ConfigError):
        ad.Adam([Parameter(np.zeros(1))], lr=0.0)


def test_adam_skips_frozen_parameters():
    frozen = Parameter(np.ones(2), trainable=False)
    opt = ad.Adam([frozen], lr=0.1)
    frozen.grad[:] = 5.0
    opt.step()
    np.testing.assert_array_equal(frozen.data, 1.0)


# -- finite-difference oracle -------------------------------------------------------


def test_finite_diff_check_linear_model_machine_precision():
    # model linear in w, so the loss is quadratic and central differences are exact
    rng = np.random.default_rng(0)
    w = Parameter(rand(rng, 2, 1, 3, 3), "w")
    b = Parameter(rand(rng, 2), "b")
    x = rand(rng, 1, 1, 6, 6)
    target = rand(rng, 1, 2, 4, 4)
    report = ad.finite_diff_check(lambda: ad.mse_loss(ad.conv2d(x, w, b), target), [w, b], tolerance=1e-9)
    assert report.max_rel_error < 1e-9, report.lines()


def test_finite_diff_check_residual_block():
    rng = np.random.default_rng(4)
    params = [Parameter(rand(rng, 1, 1, 3, 3), "w1"), Parameter(rand(rng, 1), "b1"),
              Parameter(rand(rng, 1, 1, 3, 3), "w2"), Parameter(rand(rng, 1), "b2")]
    x = rand(rng, 1, 1, 4, 4)
    target = rand(rng, 1, 1, 4, 4)
    report = ad.finite_diff_check(lambda: ad.mse_loss(ad.residual_block(x, *params), target),
                                  params, tolerance=1e-5)
    assert report.passed, report.lines()


def test_finite_diff_check_detects_injected_fault():
    rng = np.random.default_rng(4)
    w = Parameter(rand(rng, 2, 1, 3, 3), "w")
    x, target = rand(rng, 1, 1, 5, 5), rand(rng, 1, 2, 3, 3)
    with ad.inject_gradient_fault(1.05):
        report = ad.finite_diff_check(lambda: ad.mse_loss(ad.conv2d(x, w), target), [w], 1e-4)
    assert not report.passed


def test_finite_diff_check_reports_frozen_and_subsamples():
    rng = np.random.default_rng(1)
    w = Parameter(rand(rng, 4, 1, 3, 3), "w")
    frozen = Parameter(rand(rng, 4), "frozen", trainable=False)
    x, target = rand(rng, 1, 1, 5, 5), rand(rng, 1, 4, 3, 3)
    report = ad.finite_diff_check(lambda: ad.mse_loss(ad.conv2d(x, w, frozen), target),
                                  [w, frozen], tolerance=1e-6, max_entries=10)
    assert report.skipped == ["frozen"]
    assert report.probed == {"w": 10}
    assert report.passed


def _kink_setup(w0=2e-9):
    # relu(w * x) sits w0 away from its kink; steps larger than w0 cross it
    w = Parameter(np.array([[[[w0]]]]), "w")
    x = np.full((1, 1, 1, 1), 2.0)
    return w, (lambda: ad.mse_loss(ad.relu(ad.conv2d(x, w)), np.zeros((1, 1, 1, 1))))


def test_finite_diff_check_counts_kink_crossings():
    w, loss = _kink_setup()
    naive = ad.finite_diff_check(loss, [w], 1e-4, skip_kinks=False)
    assert naive.max_rel_error > 0.1  # the quotient is meaningless across the kink
    report = ad.finite_diff_check(loss, [w], 1e-4)
    assert report.kinks == {"w": 1} and report.uncompared_probes == {"w": 1}
    assert report.uncompared == ["w"]
    assert not report.passed  # nothing verified is not a pass
    assert any("kink" in line for line in report.lines())


def test_finite_diff_check_resolves_kinks_with_smaller_step():
    w, loss = _kink_setup(2e-6)  # h = 1e-5 crosses, h / 10 does not
    report = ad.finite_diff_check(loss, [w], 1e-6)
    assert report.kinks == {"w": 1} and report.uncompared_probes == {"w": 0}
    assert report.passed, report.lines()


def test_finite_diff_check_kinks_do_not_hide_faults():
    rng = np.random.default_rng(6)
    w1, w2 = Parameter(rand(rng, 3, 1, 3, 3), "w1"), Parameter(rand(rng, 1, 3, 3, 3), "w2")
    x, target = rand(rng, 1, 1, 8, 8), rand(rng, 1, 1, 4, 4)
    loss = lambda: ad.mse_loss(ad.conv2d(ad.relu(ad.conv2d(x, w1)), w2), target)
    assert ad.finite_diff_check(loss, [w1, w2], 1e-4).passed
    with ad.inject_gradient_fault(1.05):
        report = ad.finite_diff_check(loss, [w1, w2], 1e-4)
    assert not report.passed
