"""Tensor core tests.

Layout: brute-force reference implementations (nested loops, no vectorised
tricks) come first and are trusted as oracles; the vectorised operators are
then compared against them over a grid of geometries. Backward rules are
verified twice — against hand-frozen values on tiny cases, and against
central finite differences through the grad_check harness.
"""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densect import tensor as T
from densect.gradcheck import grad_check
from densect.tensor import (
    DegenerateStatsError,
    GeometryError,
    NoGraphError,
    ShapeError,
    Tensor,
    active_tape,
    backward,
    batchnorm2d,
    concat_channels,
    conv2d,
    linear,
    no_grad,
    pool2d,
    relu,
    reset_tape,
    sigmoid,
    stable_sigmoid,
)


# ---------------------------------------------------------------------------
# oracles


def conv2d_ref(x, w, b=None, stride=1, padding=0):
    """Direct convolution by summation. O(N*O*C*H2*W2*kh*kw), trusted slow path."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h2 = (h + 2 * padding - kh) // stride + 1
    w2 = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, h2, w2), dtype=x.dtype)
    for ni in range(n):
        for oi in range(o):
            for yi in range(h2):
                for xi in range(w2):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[ni, ci, yi * stride + ky, xi * stride + kx] * w[oi, ci, ky, kx]
                    out[ni, oi, yi, xi] = acc + (b[oi] if b is not None else 0.0)
    return out


def maxpool_ref(x, kernel, stride, padding=0):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    h2 = (h + 2 * padding - kernel) // stride + 1
    w2 = (w + 2 * padding - kernel) // stride + 1
    out = np.zeros((n, c, h2, w2), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for yi in range(h2):
                for xi in range(w2):
                    win = xp[ni, ci, yi * stride:yi * stride + kernel, xi * stride:xi * stride + kernel]
                    out[ni, ci, yi, xi] = win.max()
    return out


def avgpool_ref(x, kernel, stride, padding=0):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h2 = (h + 2 * padding - kernel) // stride + 1
    w2 = (w + 2 * padding - kernel) // stride + 1
    out = np.zeros((n, c, h2, w2), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for yi in range(h2):
                for xi in range(w2):
                    win = xp[ni, ci, yi * stride:yi * stride + kernel, xi * stride:xi * stride + kernel]
                    out[ni, ci, yi, xi] = win.sum() / (kernel * kernel)
    return out


def linear_ref(x, w, b):
    n, f = x.shape
    d = w.shape[0]
    out = np.zeros((n, d), dtype=x.dtype)
    for ni in range(n):
        for di in range(d):
            out[ni, di] = sum(x[ni, fi] * w[di, fi] for fi in range(f)) + b[di]
    return out


def _well_separated(rng, shape, scale=0.37):
    """Values with pairwise gaps >> the finite-difference step (no argmax flips)."""
    size = int(np.prod(shape))
    vals = rng.permutation(size).astype(np.float64) * scale
    return (vals - vals.mean()).reshape(shape)


@pytest.fixture(autouse=True)
def _fresh_tape():
    reset_tape()
    yield
    reset_tape()


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_hand_frozen():
    # out[i,j] = x[i,j] - x[i+1,j+1] for this kernel; every entry is -4
    x = Tensor(np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3))
    w = Tensor(np.array([[[[1.0, 0.0], [0.0, -1.0]]]]))
    out = conv2d(x, w)
    npt.assert_array_equal(out.data, np.full((1, 1, 2, 2), -4.0))


@pytest.mark.parametrize("stride,padding,kh", [(1, 0, 3), (2, 1, 3), (2, 3, 7), (1, 1, 1), (3, 0, 2)])
def test_conv2d_matches_reference(stride, padding, kh):
    rng = np.random.default_rng(11 * stride + padding + kh)
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, kh, kh))
    b = rng.standard_normal(4)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    npt.assert_allclose(got.data, conv2d_ref(x, w, b, stride, padding).astype(np.float32),
                        rtol=1e-4, atol=1e-4)


@given(h=st.integers(3, 12), kh=st.integers(1, 3), stride=st.integers(1, 3),
       padding=st.integers(0, 2))
@settings(max_examples=40, deadline=None)
def test_conv2d_output_shape_formula(h, kh, stride, padding):
    x = Tensor(np.zeros((1, 2, h, h)))
    w = Tensor(np.zeros((3, 2, kh, kh)))
    expect = (h + 2 * padding - kh) // stride + 1
    if expect < 1:
        with pytest.raises(GeometryError):
            conv2d(x, w, stride=stride, padding=padding)
    else:
        assert conv2d(x, w, stride=stride, padding=padding).shape == (1, 3, expect, expect)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 4, 3, 3))))


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(GeometryError):
        conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 5, 5))))


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 2)])
def test_conv2d_gradients(stride, padding):
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((2, 2, 6, 5)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)
    report = grad_check(lambda: conv2d(x, w, b, stride=stride, padding=padding).sum(),
                        {"x": x, "w": w, "b": b})
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# pooling


@pytest.mark.parametrize("kernel,stride,padding", [(2, 2, 0), (3, 2, 1), (2, 1, 1), (3, 3, 0)])
def test_maxpool_matches_reference(kernel, stride, padding):
    rng = np.random.default_rng(kernel + stride)
    x = rng.standard_normal((2, 3, 7, 6))
    got = pool2d(Tensor(x), "max", kernel=kernel, stride=stride, padding=padding)
    npt.assert_allclose(got.data, maxpool_ref(x, kernel, stride, padding).astype(np.float32),
                        rtol=1e-6)


@pytest.mark.parametrize("kernel,stride,padding", [(2, 2, 0), (3, 2, 1), (2, 1, 0)])
def test_avgpool_matches_reference(kernel, stride, padding):
    rng = np.random.default_rng(kernel * 5 + stride)
    x = rng.standard_normal((2, 2, 6, 6))
    got = pool2d(Tensor(x), "average", kernel=kernel, stride=stride, padding=padding)
    npt.assert_allclose(got.data, avgpool_ref(x, kernel, stride, padding).astype(np.float32),
                        rtol=1e-5, atol=1e-6)


def test_global_average_pool():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 5, 7))
    got = pool2d(Tensor(x), "global-average")
    assert got.shape == (2, 4, 1, 1)
    npt.assert_allclose(got.data, x.mean(axis=(2, 3), keepdims=True).astype(np.float32), rtol=1e-6)


def test_maxpool_tie_routes_to_first_occurrence():
    # both entries of the 1x2 window equal: gradient must land on the earlier one
    x = Tensor(np.array([[[[5.0, 5.0]]]]), requires_grad=True)
    out = pool2d(x, "max", kernel=1, stride=1, padding=0)
    assert out.shape == (1, 1, 1, 2)
    reset_tape()
    x2 = Tensor(np.array([[[[5.0, 5.0], [1.0, 1.0]]]]), requires_grad=True)
    out2 = pool2d(x2, "max", kernel=2, stride=2)
    out2.sum().backward()
    npt.assert_array_equal(x2.grad, np.array([[[[1.0, 0.0], [0.0, 0.0]]]]))


def test_maxpool_overlapping_windows_accumulate():
    # stride 1 windows share the maximum; its grad is the number of windows
    x = Tensor(np.array([[[[0.0, 9.0, 0.0], [0.0, 0.0, 0.0]]]]), requires_grad=True)
    out = pool2d(x, "max", kernel=2, stride=1)
    assert out.shape == (1, 1, 1, 2)
    out.sum().backward()
    npt.assert_array_equal(x.grad, np.array([[[[0.0, 2.0, 0.0], [0.0, 0.0, 0.0]]]]))


@given(st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_max_pool_dominates_average_pool(seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 6, 6))
    mx = pool2d(Tensor(x), "max", kernel=2, stride=2)
    av = pool2d(Tensor(x), "average", kernel=2, stride=2)
    assert np.all(mx.data >= av.data - 1e-6)


def test_pool_geometry_errors():
    x = Tensor(np.zeros((1, 1, 4, 4)))
    with pytest.raises(GeometryError):
        pool2d(x, "max", kernel=5, stride=1)
    with pytest.raises(GeometryError):
        pool2d(x, "max", kernel=2, stride=2, padding=2)
    with pytest.raises(ValueError):
        pool2d(x, "median", kernel=2, stride=2)


@pytest.mark.parametrize("mode,kernel,stride,padding", [
    ("max", 2, 2, 0), ("max", 3, 2, 1), ("average", 2, 2, 0),
    ("average", 3, 1, 1), ("global-average", 2, 2, 0),
])
def test_pool_gradients(mode, kernel, stride, padding):
    rng = np.random.default_rng(17)
    x = Tensor(_well_separated(rng, (2, 2, 6, 6)), requires_grad=True, dtype=np.float64)
    report = grad_check(
        lambda: pool2d(x, mode, kernel=kernel, stride=stride, padding=padding).sum(), {"x": x})
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# relu / sigmoid


def test_relu_forward_and_zero_subgradient():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    out = relu(x)
    npt.assert_array_equal(out.data, [0.0, 0.0, 2.0])
    out.sum().backward()
    npt.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_sigmoid_extreme_inputs_no_overflow():
    with np.errstate(over="raise", invalid="raise"):
        vals = stable_sigmoid(np.array([-100.0, 0.0, 100.0]))
    npt.assert_allclose(vals[0], 3.7200759760208356e-44, rtol=1e-12)
    assert vals[1] == 0.5
    assert vals[2] == 1.0  # 1 - 3.72e-44 rounds to 1.0 in float64
    assert 0.0 < vals[0]


def test_sigmoid_gradient():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal(20) * 3, requires_grad=True, dtype=np.float64)
    report = grad_check(lambda: sigmoid(x).sum(), {"x": x})
    assert report.passed, report.summary()


def test_relu_gradient():
    rng = np.random.default_rng(6)
    vals = (rng.uniform(0.1, 1.0, 30) * rng.choice([-1.0, 1.0], 30))
    x = Tensor(vals, requires_grad=True, dtype=np.float64)
    report = grad_check(lambda: (relu(x) * relu(x)).sum(), {"x": x})
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# linear / elementwise / reductions


def test_linear_matches_reference():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, 7))
    w = rng.standard_normal((3, 7))
    b = rng.standard_normal(3)
    got = linear(Tensor(x), Tensor(w), Tensor(b))
    npt.assert_allclose(got.data, linear_ref(x, w, b).astype(np.float32), rtol=1e-5)


def test_linear_gradients():
    rng = np.random.default_rng(10)
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.standard_normal((2, 5)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.standard_normal(2), requires_grad=True, dtype=np.float64)
    report = grad_check(lambda: (linear(x, w, b) * linear(x, w, b)).sum(), {"x": x, "w": w, "b": b})
    assert report.passed, report.summary()


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        linear(Tensor(np.zeros((2, 5))), Tensor(np.zeros((3, 4))))


def test_elementwise_requires_same_shape():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        a + b
    with pytest.raises(ShapeError):
        a * b
    with pytest.raises(ShapeError):
        a - b


def test_elementwise_rejects_mixed_dtype():
    a = Tensor(np.zeros(3), dtype=np.float32)
    b = Tensor(np.zeros(3), dtype=np.float64)
    with pytest.raises(ShapeError):
        a + b


def test_arithmetic_and_sum_gradients():
    rng = np.random.default_rng(12)
    a = Tensor(rng.standard_normal(8), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.standard_normal(8), requires_grad=True, dtype=np.float64)
    report = grad_check(lambda: ((a * b + a - b) * 0.5).sum(), {"a": a, "b": b})
    assert report.passed, report.summary()


def test_reshape_gradient_round_trips():
    x = Tensor(np.arange(6, dtype=np.float64), requires_grad=True)
    y = x.reshape(2, 3)
    (y * y).sum().backward()
    npt.assert_allclose(x.grad, 2 * np.arange(6, dtype=np.float64))


# ---------------------------------------------------------------------------
# concat


def test_concat_channels_order_and_grads():
    a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    b = Tensor(np.full((1, 3, 2, 2), 2.0), requires_grad=True)
    out = concat_channels([a, b])
    assert out.shape == (1, 5, 2, 2)
    npt.assert_array_equal(out.data[:, :2], a.data)
    npt.assert_array_equal(out.data[:, 2:], b.data)
    (out * out).sum().backward()
    npt.assert_array_equal(a.grad, np.full((1, 2, 2, 2), 2.0))
    npt.assert_array_equal(b.grad, np.full((1, 3, 2, 2), 4.0))


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])
    with pytest.raises(ShapeError):
        concat_channels([])


# ---------------------------------------------------------------------------
# batchnorm2d


def test_batchnorm_training_normalizes_batch():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 7 + 3)
    c = 3
    gamma = Tensor(np.ones(c))
    beta = Tensor(np.zeros(c))
    rm, rv = Tensor(np.zeros(c)), Tensor(np.ones(c))
    out = batchnorm2d(x, gamma, beta, rm, rv, training=True)
    npt.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    npt.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_batchnorm_running_stats_frozen_update():
    # batch [1,2,3,4]: mean 2.5, biased var 1.25, unbiased 1.25*4/3
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1, 1), dtype=np.float64)
    gamma, beta = Tensor(np.ones(1), dtype=np.float64), Tensor(np.zeros(1), dtype=np.float64)
    rm, rv = Tensor(np.zeros(1), dtype=np.float64), Tensor(np.ones(1), dtype=np.float64)
    batchnorm2d(x, gamma, beta, rm, rv, momentum=0.1, training=True)
    npt.assert_allclose(rm.data, [0.25], rtol=1e-12)
    npt.assert_allclose(rv.data, [0.9 + 0.1 * (1.25 * 4 / 3)], rtol=1e-12)


def test_batchnorm_eval_uses_running_stats_only():
    x = Tensor(np.array([10.0, 20.0]).reshape(2, 1, 1, 1))
    gamma, beta = Tensor(np.full(1, 2.0)), Tensor(np.full(1, 1.0))
    rm, rv = Tensor(np.full(1, 10.0)), Tensor(np.full(1, 4.0))
    out = batchnorm2d(x, gamma, beta, rm, rv, eps=0.0, training=False)
    # (x - 10)/2 * 2 + 1
    npt.assert_allclose(out.data.ravel(), [1.0, 11.0], rtol=1e-6)
    npt.assert_array_equal(rm.data, [10.0])  # eval never touches the buffers
    npt.assert_array_equal(rv.data, [4.0])


def test_batchnorm_degenerate_batch_raises():
    x = Tensor(np.zeros((1, 2, 1, 1)))
    args = [Tensor(np.ones(2)), Tensor(np.zeros(2)), Tensor(np.zeros(2)), Tensor(np.ones(2))]
    with pytest.raises(DegenerateStatsError):
        batchnorm2d(x, *args, training=True)
    # the same shape is fine in eval mode
    batchnorm2d(x, *args, training=False)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(training):
    rng = np.random.default_rng(21)
    c = 3
    x = Tensor(rng.standard_normal((4, c, 3, 3)), requires_grad=True, dtype=np.float64)
    gamma = Tensor(rng.uniform(0.5, 1.5, c), requires_grad=True, dtype=np.float64)
    beta = Tensor(rng.standard_normal(c), requires_grad=True, dtype=np.float64)
    rm = Tensor(rng.standard_normal(c), dtype=np.float64)
    rv = Tensor(rng.uniform(0.5, 2.0, c), dtype=np.float64)
    # a fixed random weighting keeps dL/dx entries O(1); the raw quadratic
    # cancels to ~1e-6 gradients that central differences cannot resolve
    r = Tensor(rng.standard_normal((4, c, 3, 3)), dtype=np.float64)
    report = grad_check(
        lambda: ((batchnorm2d(x, gamma, beta, rm, rv, training=training) * r)
                 * batchnorm2d(x, gamma, beta, rm, rv, training=training)).sum(),
        {"x": x, "gamma": gamma, "beta": beta})
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# tape semantics


def test_tape_records_in_execution_order_inputs_first():
    x = Tensor(np.ones(3), requires_grad=True)
    y = relu(x)
    z = (y * y).sum()
    tape = active_tape()
    assert [n.output for n in tape.nodes] == [y, z.node.inputs[0], z]
    pos = {id(n.output): i for i, n in enumerate(tape.nodes)}
    for i, node in enumerate(tape.nodes):
        for inp in node.inputs:
            if inp.node is not None:
                assert pos[id(inp)] < i


def test_reset_tape_discards_history():
    x = Tensor(np.ones(2), requires_grad=True)
    relu(x)
    assert len(active_tape()) == 1
    reset_tape()
    assert len(active_tape()) == 0


def test_no_grad_suppresses_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = relu(x)
    assert y.node is None and not y.requires_grad
    assert len(active_tape()) == 0
    with pytest.raises(NoGraphError):
        backward(y.sum() if y.node else y)


def test_backward_without_graph_raises():
    with pytest.raises(NoGraphError):
        backward(Tensor(np.array(1.0), requires_grad=True))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    y = relu(x)
    with pytest.raises(ValueError):
        backward(y)


def test_gradients_accumulate_until_zeroed():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = (x * x).sum()
    backward(y)
    npt.assert_allclose(x.grad, [4.0])
    backward(y)
    npt.assert_allclose(x.grad, [8.0])
    x.zero_grad()
    assert x.grad is None


def test_diamond_graph_sums_both_paths():
    # z = x*x + x*x: both branches contribute 2x each
    x = Tensor(np.array([3.0]), requires_grad=True)
    a = x * x
    b = x * x
    (a + b).sum().backward()
    npt.assert_allclose(x.grad, [12.0])


def test_non_requires_grad_leaf_never_gets_grad():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    k = Tensor(np.array([3.0, 4.0]))
    (x * k).sum().backward()
    assert k.grad is None
    npt.assert_allclose(x.grad, [3.0, 4.0])


def test_default_dtype_and_override():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor([1.0], dtype=np.float64).dtype == np.float64
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64
    assert Tensor(np.zeros(2)).data.flags["C_CONTIGUOUS"]


def test_grad_check_rejects_float32():
    x = Tensor(np.ones(2), requires_grad=True, dtype=np.float32)
    with pytest.raises(ValueError, match="float64"):
        grad_check(lambda: (x * x).sum(), {"x": x})


def test_grad_check_flags_wrong_gradient():
    # a deliberately wrong backward rule must be caught
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)

    def bad_square():
        out = x.data * x.data
        return T.record((x,), out, lambda g: (g * 3.0 * x.data,)).sum()  # claims d/dx = 3x

    report = grad_check(bad_square, {"x": x})
    assert not report.passed
    assert report.failures()
