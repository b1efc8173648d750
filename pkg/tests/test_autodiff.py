import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conda_cl import autodiff as ad
from conda_cl.checks import fd_gradient_check
from conda_cl.errors import BadConfig, BadShape, DomainError, DuplicateParam
from conda_cl.rng import Rng

GRAD_TOL = 1e-6


@pytest.fixture
def rng():
    return Rng(1234)


def test_make_param_zero_init():
    store = ad.ParamStore()
    b = ad.make_param(store, "b", [3], "zeros")
    assert b.value.tolist() == [0.0, 0.0, 0.0]
    assert "b" in store


def test_make_param_uniform_is_deterministic():
    def draw():
        store = ad.ParamStore()
        return ad.make_param(store, "w", [2, 2], ("uniform", -1, 1), Rng(7)).value

    a, b = draw(), draw()
    assert np.array_equal(a, b)
    assert np.all((a >= -1) & (a < 1))


def test_make_param_errors():
    store = ad.ParamStore()
    ad.make_param(store, "w", [2, 2], ("uniform", -1, 1), Rng(7))
    with pytest.raises(DuplicateParam):
        ad.make_param(store, "w", [2, 2], ("uniform", -1, 1), Rng(7))
    with pytest.raises(BadShape):
        ad.make_param(store, "z", [2, 0], "zeros")


def test_add_and_identity_matmul(rng):
    out = ad.add(ad.constant([1.0, 2.0]), ad.constant([3.0, 4.0]))
    assert out.value.tolist() == [4.0, 6.0]
    a = rng.normal((2, 2))
    assert np.array_equal(ad.matmul(ad.constant(np.eye(2)), ad.constant(a)).value, a)


def test_arith_shape_errors():
    with pytest.raises(BadShape):
        ad.add(ad.constant(np.ones(3)), ad.constant(np.ones(4)))
    with pytest.raises(BadShape):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
    with pytest.raises(BadShape):
        ad.concat([ad.constant(np.ones((2, 3))), ad.constant(np.ones((3, 2)))], axis=0)
    with pytest.raises(BadShape):
        ad.slice_(ad.constant(np.ones(3)), 0, 2, 5)


def test_grad_of_sum_of_product_is_other_factor(rng):
    a = ad.variable(rng.normal((3, 4)))
    b = ad.variable(rng.normal((3, 4)))
    err = fd_gradient_check(lambda: ad.sum_(ad.mul(a, b)), [a, b], rng)
    assert err <= GRAD_TOL
    a.zero_grad()
    ad.backward(ad.sum_(ad.mul(a, b)))
    assert np.allclose(a.grad, b.value, rtol=0, atol=0)


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "scalar_mul", "matmul", "concat", "slice"])
def test_arith_gradients(kind, rng):
    shape_b = (4, 2) if kind == "matmul" else (3, 4)
    a = ad.variable(rng.normal((3, 4)))
    b = ad.variable(rng.normal(shape_b))
    weights = ad.constant(rng.normal((6, 4) if kind == "concat" else (3, 2) if kind in ("matmul", "slice") else (3, 4)))

    def loss():
        if kind == "scalar_mul":
            out = ad.arith(kind, a, c=-2.5)
        elif kind == "concat":
            out = ad.arith(kind, a, b, axis=0)
        elif kind == "slice":
            out = ad.arith(kind, a, axis=1, start=1, stop=3)
        else:
            out = ad.arith(kind, a, b)
        return ad.sum_(ad.mul(ad.tanh(out), weights))

    leaves = [a] if kind in ("scalar_mul", "slice") else [a, b]
    assert fd_gradient_check(loss, leaves, rng) <= GRAD_TOL


def test_scalar_broadcast_gradient(rng):
    a = ad.variable(rng.normal((3, 4)))
    s = ad.variable(rng.normal((1,)))
    assert fd_gradient_check(lambda: ad.sum_(ad.tanh(ad.mul(a, s))), [a, s], rng) <= GRAD_TOL


def test_reductions():
    assert float(ad.sum_(ad.constant([1.0, 2.0, 3.0])).value) == 6.0
    assert np.isclose(float(ad.logsumexp(ad.constant([0.0, 0.0])).value), np.log(2.0), rtol=0, atol=1e-15)
    big = ad.logsumexp(ad.constant([1000.0, 1000.0]))
    assert np.isclose(float(big.value), 1000.0 + np.log(2.0))
    with pytest.raises(BadShape):
        ad.sum_(ad.constant(np.ones((2, 2))), axis=2)


def test_mean_gradient_is_one_over_n(rng):
    a = ad.variable(rng.normal((4, 5)))
    ad.backward(ad.mean(a))
    assert np.allclose(a.grad, 1.0 / 20, rtol=0, atol=1e-15)
    a.zero_grad()
    assert fd_gradient_check(lambda: ad.mean(a), [a], rng) <= GRAD_TOL


@pytest.mark.parametrize("axis", [None, 0, 1, -1])
def test_reduction_gradients(axis, rng):
    a = ad.variable(rng.normal((3, 5)))

    def loss():
        lse = ad.logsumexp(a, axis=axis)
        m = ad.mean(ad.tanh(a), axis=axis)
        return ad.sum_(ad.mul(lse, ad.add(m, ad.constant(1.5))))

    assert fd_gradient_check(loss, [a], rng) <= GRAD_TOL


def test_conv_1x1_is_channel_matmul(rng):
    x = rng.normal((2, 4, 5, 3))
    w = rng.normal((6, 4, 1, 1))
    b = rng.normal(6)
    out = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(b)).value
    # oracle: explicit matmul over the channel axis at every pixel
    expect = np.empty((2, 6, 5, 3))
    for n in range(2):
        for i in range(5):
            for j in range(3):
                expect[n, :, i, j] = w[:, :, 0, 0] @ x[n, :, i, j] + b
    assert np.max(np.abs(out - expect)) <= 1e-12


def test_conv_identity_kernel(rng):
    x = rng.normal((1, 1, 6, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(np.zeros(1)), pad=1).value
    assert np.array_equal(out, x)


def test_conv_matches_direct_loops(rng):
    x = rng.normal((2, 3, 7, 7))
    w = rng.normal((4, 3, 3, 3))
    for stride, pad in ((1, 1), (2, 1), (2, 0), (1, 0)):
        out = ad.conv2d(ad.constant(x), ad.constant(w), stride=stride, pad=pad).value
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (7 + 2 * pad - 3) // stride + 1
        expect = np.zeros((2, 4, ho, ho))
        for i in range(ho):
            for j in range(ho):
                patch = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                expect[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
        assert np.max(np.abs(out - expect)) <= 1e-12


def test_conv_gradient_check(rng):
    x = ad.variable(rng.normal((2, 2, 5, 5)))
    w = ad.variable(rng.normal((3, 2, 3, 3)))
    b = ad.variable(rng.normal(3))
    wts = ad.constant(rng.normal((2, 3, 5, 5)))
    loss = lambda: ad.sum_(ad.mul(ad.tanh(ad.conv2d(x, w, b, pad=1)), wts))
    assert fd_gradient_check(loss, [x, w, b], rng, n_coords=30) <= GRAD_TOL


@pytest.mark.parametrize("stride,pad,k", [(2, 1, 3), (1, 0, 3), (1, 2, 5), (2, 0, 1)])
def test_conv_gradient_variants(stride, pad, k, rng):
    size = 5 if stride == 2 else 6
    x = ad.variable(rng.normal((2, 2, size, size)))
    w = ad.variable(rng.normal((3, 2, k, k)))
    loss = lambda: ad.sum_(ad.tanh(ad.conv2d(x, w, stride=stride, pad=pad)))
    assert fd_gradient_check(loss, [x, w], rng) <= GRAD_TOL


def test_conv_shape_errors():
    x = ad.constant(np.ones((1, 1, 4, 4)))
    with pytest.raises(BadShape):
        ad.conv2d(x, ad.constant(np.ones((1, 1, 3, 3))), stride=2, pad=0)
    with pytest.raises(BadShape):
        ad.conv2d(x, ad.constant(np.ones((1, 1, 2, 2))))


def test_resample():
    one = ad.avgpool2(ad.constant(np.ones((1, 1, 2, 2))))
    assert one.value.tolist() == [[[[1.0]]]]
    with pytest.raises(BadShape):
        ad.avgpool2(ad.constant(np.ones((1, 1, 3, 2))))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 3), st.integers(1, 4))
def test_upsample_then_pool_is_identity(seed, c, hw):
    x = Rng(seed).normal((2, c, hw, hw))
    out = ad.avgpool2(ad.nearest_upsample2(ad.constant(x))).value
    assert np.array_equal(out, x)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32))
def test_block_constant_inputs_survive_pool_then_upsample(seed):
    coarse = Rng(seed).normal((1, 2, 3, 3))
    x = np.repeat(np.repeat(coarse, 2, axis=2), 2, axis=3)
    out = ad.nearest_upsample2(ad.avgpool2(ad.constant(x))).value
    assert np.array_equal(out, x)


@pytest.mark.parametrize("kind", ["avgpool2", "nearest_upsample2"])
def test_resample_gradients(kind, rng):
    x = ad.variable(rng.normal((1, 1, 4, 4)))
    wts = ad.constant(rng.normal((1, 1, 2, 2) if kind == "avgpool2" else (1, 1, 8, 8)))
    loss = lambda: ad.sum_(ad.mul(ad.tanh(ad.resample(kind, x)), wts))
    assert fd_gradient_check(loss, [x], rng) <= GRAD_TOL


def test_activation_values():
    assert ad.relu(ad.constant([-1.0, 2.0])).value.tolist() == [0.0, 2.0]
    t = ad.variable([0.0])
    ad.backward(ad.sum_(ad.tanh(t)))
    assert ad.tanh(ad.constant([0.0])).value[0] == 0.0
    assert t.grad[0] == 1.0
    with pytest.raises(DomainError):
        ad.log(ad.constant([1.0, 0.0]))


@pytest.mark.parametrize("kind", ["relu", "leaky_relu", "tanh", "sigmoid", "exp", "log"])
def test_activation_gradients(kind, rng):
    vals = rng.normal((4, 5))
    vals = np.where(np.abs(vals) < 0.05, 0.5, vals)  # keep away from kinks
    if kind == "log":
        vals = np.abs(vals) + 0.1
    x = ad.variable(vals)
    wts = ad.constant(rng.normal((4, 5)))
    assert fd_gradient_check(lambda: ad.sum_(ad.mul(ad.activation(kind, x), wts)), [x], rng) <= GRAD_TOL


def test_softmax_channels_values():
    s = ad.softmax_channels(ad.constant(np.zeros((1, 4, 2, 2)))).value
    assert np.allclose(s, 0.25, rtol=0, atol=1e-15)
    s = ad.softmax_channels(ad.constant(np.log([1.0, 3.0]).reshape(1, 2, 1, 1))).value
    assert np.allclose(s.ravel(), [0.25, 0.75], rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.1, 50.0))
def test_softmax_on_simplex(seed, scale):
    x = Rng(seed).normal((2, 5, 3, 3)) * scale
    s = ad.softmax_channels(ad.constant(x)).value
    assert np.all((s >= 0) & (s <= 1))
    assert np.max(np.abs(s.sum(axis=1) - 1.0)) <= 1e-12


def test_softmax_jvp(rng):
    x = ad.variable(rng.normal((1, 3, 1, 1)))
    wts = ad.constant(rng.normal((1, 3, 1, 1)))
    assert fd_gradient_check(lambda: ad.sum_(ad.mul(ad.softmax_channels(x), wts)), [x], rng) <= GRAD_TOL
    assert fd_gradient_check(lambda: ad.sum_(ad.mul(ad.log_softmax_channels(x), wts)), [x], rng) <= GRAD_TOL


def test_logabsdet_gradient(rng):
    m = ad.variable(rng.normal((4, 4)) + 2 * np.eye(4))
    assert fd_gradient_check(lambda: ad.logabsdet(m), [m], rng) <= GRAD_TOL


def test_backward_basics():
    store = ad.ParamStore()
    w = ad.make_param(store, "w", [3], "zeros")
    ad.backward(ad.sum_(w))
    assert w.grad.tolist() == [1.0, 1.0, 1.0]
    ad.backward(ad.sum_(w))
    assert w.grad.tolist() == [2.0, 2.0, 2.0]  # accumulates
    store.zero_grads()
    ad.backward(ad.scalar_mul(ad.sum_(w), 0.0))
    assert w.grad.tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(BadShape):
        ad.backward(w)


def test_end_to_end_conv_net_gradient(rng):
    store = ad.ParamStore()
    ad.make_param(store, "c1", (4, 2, 3, 3), "kaiming", rng)
    ad.make_param(store, "b1", (4,), ("uniform", -0.1, 0.1), rng)
    ad.make_param(store, "c2", (4, 4, 3, 3), "kaiming", rng)
    ad.make_param(store, "c3", (3, 4, 1, 1), "kaiming", rng)
    x = ad.constant(rng.normal((2, 2, 6, 6)))
    wts = ad.constant(rng.normal((2, 3, 6, 6)))

    def loss():
        h = ad.tanh(ad.conv2d(x, store["c1"], store["b1"], pad=1))
        h = ad.nearest_upsample2(ad.avgpool2(ad.leaky_relu(ad.conv2d(h, store["c2"], pad=1))))
        return ad.sum_(ad.mul(ad.softmax_channels(ad.conv2d(h, store["c3"])), wts))

    leaves = [store[k] for k in store]
    assert fd_gradient_check(loss, leaves, rng, n_coords=20) <= GRAD_TOL


def test_sgd_step():
    store = ad.ParamStore()
    p = store.add("p", [1.0, 2.0])
    p.grad = np.array([0.5, -1.0])
    ad.sgd_step(store, lr=1.0, momentum=0.0)
    assert p.value.tolist() == [0.5, 3.0]
    assert np.all(p.grad == 0)
    with pytest.raises(BadConfig):
        ad.sgd_step(store, lr=-1.0)


def test_sgd_momentum_recurrence():
    store = ad.ParamStore()
    p = store.add("p", [0.0])
    lr, g = 2.5e-4, 3.0
    for _ in range(2):
        p.grad = np.array([g])
        ad.sgd_step(store, lr=lr, momentum=0.9)
    # v1 = g, v2 = 0.9 g + g
    assert np.isclose(p.value[0], -lr * (g + 1.9 * g), rtol=1e-15, atol=0)


def test_frozen_store_still_passes_input_gradients(rng):
    store = ad.ParamStore()
    w = ad.make_param(store, "w", (2, 2), "kaiming", rng)
    store.freeze()
    x = ad.variable(rng.normal((3, 2)))
    ad.backward(ad.sum_(ad.tanh(ad.matmul(x, w))))
    assert np.any(x.grad != 0)
    assert np.all(w.grad == 0)
