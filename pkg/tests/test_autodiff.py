"""Gradient, shape and optimizer checks for the differentiation engine."""

import numpy as np
import pytest

import mixcrypt.autodiff as ad
from mixcrypt.errors import ContractError, DimensionError

from conftest import away_from_kinks, finite_difference_check, make_param


def test_dense_identity_and_arithmetic():
    y = ad.forward_dense(ad.Tensor([1.0, 2.0]), ad.Tensor(np.eye(2)), ad.Tensor([0.0, 0.0]))
    assert np.array_equal(y.data, [1.0, 2.0])
    y = ad.forward_dense(ad.Tensor([3.0, 4.0]), ad.Tensor([[1.0, 1.0], [0.0, 2.0]]), ad.Tensor([0.0, 1.0]))
    assert np.array_equal(y.data, [7.0, 9.0])


def test_dense_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.forward_dense(ad.Tensor([1.0, 2.0, 3.0]), ad.Tensor(np.eye(2)), ad.Tensor([0.0, 0.0]))


def test_dense_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = make_param(rng, (8,))
    w = make_param(rng, (8, 8))
    b = make_param(rng, (8,))

    def loss():
        y = ad.forward_dense(x, w, b)
        return ad.tmean(ad.mul(y, y))

    assert finite_difference_check(loss, [x, w, b]) < 1e-4


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = ad.Tensor(rng.uniform(-1, 1, (1, 6, 6)))
    k = ad.Tensor(np.ones((1, 1, 1, 1)))
    assert np.array_equal(ad.conv2d(x, k, 1, 0).data, x.data)


def test_conv2d_constant_image_box_kernel():
    c = 0.37
    x = ad.Tensor(np.full((1, 8, 8), c))
    k = ad.Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, k, 1, 0)
    assert np.allclose(out.data, 9 * c)


def test_conv2d_stride2_shape():
    x = ad.Tensor(np.zeros((3, 32, 32)))
    k = ad.Tensor(np.zeros((4, 3, 3, 3)))
    assert ad.conv2d(x, k, 2, 1).shape == (4, 16, 16)


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        ad.conv2d(ad.Tensor(np.zeros((1, 4, 4))), ad.Tensor(np.zeros((1, 1, 7, 7))), 1, 0)


def test_conv_shape_formula_sweep():
    rng = np.random.default_rng(3)
    for _ in range(40):
        h, w = int(rng.integers(4, 12)), int(rng.integers(4, 12))
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, 2))
        if k > h + 2 * p or k > w + 2 * p:
            continue
        x = ad.Tensor(np.zeros((2, h, w)))
        kern = ad.Tensor(np.zeros((3, 2, k, k)))
        out = ad.conv2d(x, kern, s, p)
        assert out.shape == (3, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        kt = ad.Tensor(np.zeros((2, 3, k, k)))
        for op in range(s):
            back = ad.conv_transpose2d(x, kt, s, p, op)
            assert back.shape == (3, (h - 1) * s - 2 * p + k + op, (w - 1) * s - 2 * p + k + op)


def test_conv_transpose_shapes_and_round_trip_sizes():
    x = ad.Tensor(np.zeros((4, 16, 16)))
    k = ad.Tensor(np.zeros((4, 4, 3, 3)))
    assert ad.conv_transpose2d(x, k, 2, 1, 1).shape == (4, 32, 32)
    # stride-2 down then up restores mixed-parity sizes via per-axis output padding
    x33 = ad.Tensor(np.zeros((3, 33, 34)))
    kd = ad.Tensor(np.zeros((4, 3, 3, 3)))
    mid = ad.conv2d(x33, kd, 2, 1)
    assert mid.shape == (4, 17, 17)
    ku = ad.Tensor(np.zeros((4, 3, 3, 3)))
    up = ad.conv_transpose2d(mid, ku, 2, 1, (0, 1))
    assert up.shape == (3, 33, 34)


def test_conv_transpose_is_adjoint_of_conv():
    # delta input through the dense-matrix transpose oracle
    rng = np.random.default_rng(5)
    kern = rng.uniform(-1, 1, (2, 1, 3, 3))
    h = w = 6
    stride, pad = 2, 1
    hout = (h + 2 * pad - 3) // stride + 1
    cols = []
    for i in range(h * w):
        x = np.zeros((1, h, w))
        x[0, i // w, i % w] = 1.0
        cols.append(ad.conv2d(ad.Tensor(x), ad.Tensor(kern), stride, pad).data.reshape(-1))
    dense = np.stack(cols, axis=1)  # (out_dim, in_dim)
    y = rng.uniform(-1, 1, (2, hout, hout))
    expect = (dense.T @ y.reshape(-1)).reshape(1, h, w)
    got = ad.conv_transpose2d(ad.Tensor(y), ad.Tensor(kern), stride, pad, (1, 1)).data
    # adjoint output is h x w here because (hout-1)*2 - 2 + 3 + 1 == h
    assert got.shape == expect.shape
    assert np.allclose(got, expect, atol=1e-12)


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    x = make_param(rng, (2, 7, 9))
    k_down = make_param(rng, (3, 2, 3, 3))
    k_up = make_param(rng, (3, 2, 3, 3))

    def loss():
        y = ad.sigmoid(ad.conv2d(x, k_down, 2, 1))
        z = ad.conv_transpose2d(y, k_up, 2, 1, (0, 1))
        return ad.tmean(ad.mul(z, z))

    assert finite_difference_check(loss, [x, k_down, k_up]) < 1e-4


def test_backward_linear_and_analytic_cases():
    x = ad.Tensor([1.0, 1.0, 1.0], requires_grad=True)
    ad.tsum(x).backward()
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    y = ad.Tensor([1.0, 2.0], requires_grad=True)
    ad.tmean(ad.mul(y, y)).backward()
    assert np.allclose(y.grad, [1.0, 2.0])


def test_backward_requires_scalar():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        ad.mul(x, 2.0).backward()


def test_backward_accumulates_without_reset():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    ad.tsum(x).backward()
    ad.tsum(x).backward()
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_backward_of_sum_equals_sum_of_backwards():
    rng = np.random.default_rng(13)
    x = make_param(rng, (3, 5, 5))

    def loss_a():
        return ad.tmean(ad.mul(x, x))

    def loss_b():
        return ad.tsum(ad.relu(x))

    ad.add(loss_a(), loss_b()).backward()
    combined = x.grad.copy()
    x.zero_grad()
    loss_a().backward()
    ga = x.grad.copy()
    x.zero_grad()
    loss_b().backward()
    gb = x.grad.copy()
    assert np.allclose(combined, ga + gb, atol=1e-12)


def test_elementwise_op_gradients():
    rng = np.random.default_rng(17)
    checks = {
        "relu": lambda t: ad.tsum(ad.relu(t)),
        "leaky": lambda t: ad.tsum(ad.leaky_relu(t, 0.1)),
        "sigmoid": lambda t: ad.tsum(ad.sigmoid(t)),
        "abs": lambda t: ad.tsum(ad.absolute(t)),
        "exp": lambda t: ad.tsum(ad.exp(t)),
        "var": ad.tvariance,
        "clamp": lambda t: ad.tsum(ad.clamp(t, -0.9, 0.9)),
    }
    for name, fn in checks.items():
        t = ad.Tensor(away_from_kinks(rng, (4, 4)), requires_grad=True)
        assert finite_difference_check(lambda: fn(t), [t]) < 1e-4, name
    t3 = ad.Tensor(away_from_kinks(rng, (3, 4, 4)), requires_grad=True)
    err = finite_difference_check(lambda: ad.tvariance(ad.channel_mean(t3)), [t3])
    assert err < 1e-4, "channel_mean"


def test_maximum_concat_div_log_gradients():
    rng = np.random.default_rng(19)
    a = make_param(rng, (6,))
    b = make_param(rng, (6,))
    pos = ad.Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True)

    def loss():
        m = ad.maximum(a, b)
        c = ad.concat([m, ad.div(a, pos), ad.log(pos)])
        return ad.tmean(ad.mul(c, c))

    assert finite_difference_check(loss, [a, b, pos]) < 1e-4


def test_softmax_matmul_transpose_gradients():
    rng = np.random.default_rng(23)
    a = make_param(rng, (4, 5))
    b = make_param(rng, (5, 4))

    def loss():
        s = ad.softmax_rows(ad.matmul2d(a, b))
        return ad.tvariance(ad.matmul2d(s, ad.transpose2d(s)))

    assert finite_difference_check(loss, [a, b]) < 1e-4


def test_pool_and_upsample_gradients_odd_sizes():
    rng = np.random.default_rng(29)
    x = make_param(rng, (2, 7, 9))

    def loss():
        y = ad.avg_pool2d(x, 4)
        u = ad.upsample_nearest(y, 4, 7, 9)
        return ad.tmean(ad.mul(u, u))

    assert finite_difference_check(loss, [x]) < 1e-4


def test_mean_stack_is_exactly_permutation_invariant():
    rng = np.random.default_rng(31)
    parts = [rng.uniform(-1, 1, (3, 4, 4)) for _ in range(5)]
    base = ad.mean_stack([ad.Tensor(p) for p in parts]).data
    perm = ad.mean_stack([ad.Tensor(parts[i]) for i in (3, 0, 4, 2, 1)]).data
    assert np.array_equal(base, perm)


def test_select_abs_max_total_order():
    a = ad.Tensor([0.2, -0.9, 0.5, -0.5])
    b = ad.Tensor([-0.9, 0.2, -0.5, 0.5])
    out = ad.select_abs_max(a, b)
    assert np.array_equal(out.data, [-0.9, -0.9, 0.5, 0.5])


def test_adam_zero_gradient_is_identity():
    p = ad.Tensor([1.0, -2.0], requires_grad=True)
    state = ad.AdamState.for_params([p])
    before = p.data.copy()
    ad.adam_step([p], [np.zeros(2)], state)
    assert np.array_equal(p.data, before)
    assert state.step_count == 1


def test_adam_descends_against_constant_gradient():
    p = ad.Tensor([0.0], requires_grad=True)
    state = ad.AdamState.for_params([p], learning_rate=1e-2)
    for _ in range(50):
        ad.adam_step([p], [np.array([2.5])], state)
    assert p.data[0] < 0
    assert state.step_count == 50


def test_adam_first_step_magnitude_is_learning_rate():
    # hand-computed: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    lr = 1e-4
    g = 0.73
    p = ad.Tensor([0.0], requires_grad=True)
    state = ad.AdamState.for_params([p], learning_rate=lr)
    ad.adam_step([p], [np.array([g])], state)
    expected = -lr * g / (abs(g) + state.epsilon)
    assert abs(p.data[0] - expected) < 1e-15
    assert abs(abs(p.data[0]) - lr) < 1e-9


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(37)
    named = {
        "down.w": rng.uniform(-1, 1, (4, 3, 3, 3)),
        "head.b": rng.uniform(-1, 1, (1,)),
        "scalar": np.array(3.5),
    }
    path = tmp_path / "model.mxw"
    ad.save_checkpoint(path, named)
    assert path.read_bytes()[:4] == b"MXW1"
    loaded = ad.load_checkpoint(path)
    assert list(loaded) == list(named)
    for k in named:
        assert np.array_equal(loaded[k], named[k])


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.mxw"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(Exception):
        ad.load_checkpoint(path)
