import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import direct_conv
from susa.numerics import Node, Parameter, backward, check_finite, grad_check, gradient_errors, kernels, ops


def sliding_mean(x, window):
    """Per-pixel average over the in-bounds part of a centred window."""
    h, w = x.shape
    r = window // 2
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            out[i, j] = x[max(i - r, 0):i + r + 1, max(j - r, 0):j + r + 1].mean()
    return out


# -- conv2d ------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 4, 5, 1))
    assert np.array_equal(kernels.conv2d_forward(x, np.ones((1, 1, 1, 1))), x)


def test_conv_zero_kernel():
    x = np.random.default_rng(1).standard_normal((1, 5, 5, 2))
    assert not kernels.conv2d_forward(x, np.zeros((3, 3, 2, 4))).any()


@pytest.mark.parametrize("pad", ["same", "edge", "valid"])
def test_conv_matches_direct_loops(pad):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 5, 5, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    ours = kernels.conv2d_forward(x, w, pad)
    ref = direct_conv(x, w, pad)
    assert np.max(np.abs(ours - ref) / np.maximum(np.abs(ref), 1e-12)) < 1e-6


def test_edge_padding_keeps_constant_maps_constant():
    x = np.full((2, 6, 5, 3), 1.75)
    w = np.random.default_rng(5).standard_normal((3, 3, 3, 2))
    out = kernels.conv2d_forward(x, w, "edge")
    assert np.allclose(out, out[0, 0, 0], atol=1e-12)


@pytest.mark.parametrize("size", [(4, 5), (1, 3), (2, 2)])
def test_edge_padding_gradients(size):
    rng = np.random.default_rng(6)
    x = Parameter(rng.standard_normal((2, *size, 2)), "x")
    w = Parameter(rng.standard_normal((3, 3, 2, 3)), "w")
    t = rng.standard_normal((2, *size, 3))
    assert grad_check(lambda: ops.mse(ops.conv2d(x, w, "edge"), t), [x, w]) < 1e-6


def test_conv_same_keeps_spatial_dims():
    x = np.zeros((1, 7, 4, 3))
    assert kernels.conv2d_forward(x, np.zeros((3, 3, 3, 2))).shape == (1, 7, 4, 2)


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(1, 4, 4, 2\).*\(3, 3, 3, 1\)"):
        kernels.conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)))


def test_conv_even_kernel_rejected_for_same_padding():
    with pytest.raises(ValueError, match="odd"):
        kernels.conv2d_forward(np.zeros((1, 4, 4, 1)), np.zeros((2, 2, 1, 1)))


@settings(max_examples=25, deadline=None)
@given(alpha=st.floats(-10, 10, allow_nan=False), seed=st.integers(0, 1000))
def test_conv_is_linear_in_input(alpha, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 4, 4, 2))
    w = rng.standard_normal((3, 3, 2, 2))
    lhs = kernels.conv2d_forward(alpha * x, w)
    rhs = alpha * kernels.conv2d_forward(x, w)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_conv_is_linear_in_weights():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 4, 4, 2))
    w = rng.standard_normal((3, 3, 2, 2))
    assert np.allclose(kernels.conv2d_forward(x, -2.5 * w), -2.5 * kernels.conv2d_forward(x, w), atol=1e-12)


# -- pooling and upsampling ----------------------------------------------------

@pytest.mark.parametrize("window,stride,pad", [(2, 2, "valid"), (3, 1, "same"), (5, 1, "same"), (2, 2, "same")])
def test_mean_pool_of_constant_is_constant(window, stride, pad):
    x = np.full((1, 7, 6, 2), 3.25)
    out, _ = kernels.pool2d_forward(x, "mean", window, stride, pad)
    assert np.allclose(out, 3.25, rtol=0, atol=1e-14)


def test_max_pool_listed_values():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    out, _ = kernels.pool2d_forward(x, "max", 2, 2, "valid")
    assert out.reshape(-1).tolist() == [4.0]


def test_mean_pool_matches_sliding_window():
    x = np.random.default_rng(4).standard_normal((9, 9))
    out, _ = kernels.pool2d_forward(x[None, :, :, None], "mean", 5, 1, "same")
    assert np.max(np.abs(out[0, :, :, 0] - sliding_mean(x, 5))) < 1e-7


def test_pool_window_larger_than_input_rejected():
    with pytest.raises(ValueError):
        kernels.pool2d_forward(np.zeros((1, 3, 3, 1)), "mean", 4, 1, "valid")


def test_upsample_identity_and_replication():
    x = np.random.default_rng(5).standard_normal((1, 3, 2, 2))
    assert np.array_equal(kernels.upsample_nearest2d_forward(x, 1), x)
    out = kernels.upsample_nearest2d_forward(np.ones((1, 1, 1, 1)), 3)
    assert out.shape == (1, 3, 3, 1) and np.all(out == 1)


def test_upsample_gradient_of_sum_is_factor_squared():
    x = Parameter(np.random.default_rng(6).standard_normal((1, 2, 3, 1)), "x")
    up = ops.upsample_nearest2d(x, 3)
    total = Node(np.sum(up.value), (up,), lambda g: (np.full(up.value.shape, g),))
    backward(total)
    assert np.all(x.grad == 9.0)


@pytest.mark.parametrize("factor", [1, 2, 3])
def test_upsample_then_mean_pool_is_identity(factor):
    x = np.random.default_rng(factor).standard_normal((2, 3, 4, 2))
    up = kernels.upsample_nearest2d_forward(x, factor)
    out, _ = kernels.pool2d_forward(up, "mean", factor, factor, "valid")
    assert np.allclose(out, x, atol=1e-14)


# -- PELU -----------------------------------------------------------------------

def test_pelu_zero_maps_to_zero():
    for a, b in [(0.5, 2.0), (1.0, 1.0), (3.0, 0.1)]:
        out, _ = kernels.pelu_forward(np.zeros(3), a, b)
        assert np.all(out == 0)


def test_pelu_scalar_branches():
    out, _ = kernels.pelu_forward(np.array([2.0]), 2.0, 4.0)
    assert out[0] == pytest.approx(1.0, abs=1e-15)
    out, _ = kernels.pelu_forward(np.array([-0.693147]), 2.0, 1.0)
    assert out[0] == pytest.approx(-1.0, abs=1e-5)


def test_pelu_unit_parameters_is_elu():
    h = np.linspace(-3, 3, 61)
    out, _ = kernels.pelu_forward(h, 1.0, 1.0)
    assert np.allclose(out, np.where(h >= 0, h, np.expm1(h)), atol=1e-15)


@pytest.mark.parametrize("a,b", [(0.0, 1.0), (1.0, -1.0)])
def test_pelu_rejects_non_positive_parameters(a, b):
    with pytest.raises(ValueError, match="positive"):
        kernels.pelu_forward(np.zeros(2), a, b)


# -- losses ---------------------------------------------------------------------

def test_mse_values_and_shape_check():
    assert kernels.mse_forward(np.ones(3), np.ones(3))[0] == 0
    assert kernels.mse_forward(np.array([1.0, 1.0]), np.array([0.0, 2.0]))[0] == 1.0
    with pytest.raises(ValueError, match="shape"):
        kernels.mse_forward(np.ones(2), np.ones(3))


def test_mse_gradient_matches_differences():
    rng = np.random.default_rng(7)
    p = Parameter(rng.standard_normal((3, 4)), "p")
    t = rng.standard_normal((3, 4))
    assert grad_check(lambda: ops.mse(p, t), [p]) < 1e-6


def test_cross_entropy_uniform_logits():
    loss, _ = kernels.softmax_xent_forward(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_is_stable_for_huge_logits():
    with np.errstate(over="raise", invalid="raise"):
        loss, _ = kernels.softmax_xent_forward(np.array([[1000.0, -1000.0]]), np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_matches_high_precision_reference():
    rng = np.random.default_rng(8)
    logits = rng.standard_normal((6, 5)) * 3
    labels = rng.integers(0, 5, 6)
    ref = np.mean([math.log(math.fsum(math.exp(v) for v in row)) - row[y] for row, y in zip(logits.tolist(), labels)])
    loss, _ = kernels.softmax_xent_forward(logits, labels)
    assert abs(loss - ref) / abs(ref) < 1e-6


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError, match="out of range"):
        kernels.softmax_xent_forward(np.zeros((2, 3)), np.array([0, 3]))


def test_softmax_rows_sum_to_one():
    p = kernels.softmax(np.random.default_rng(9).standard_normal((5, 7)) * 20)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


# -- graph and gradient checker ---------------------------------------------------

def test_check_finite_reports_count():
    with pytest.raises(FloatingPointError, match="2 non-finite"):
        check_finite(np.array([1.0, np.nan, np.inf]), "x")


def test_parameter_grad_shape_matches_value():
    p = Parameter(np.zeros((2, 3)), "w")
    assert p.grad.shape == p.value.shape


def test_backward_accumulates_through_shared_nodes():
    x = Parameter(np.array([1.5, -2.0]), "x")
    y = ops.add(x, x)
    total = Node(np.sum(y.value), (y,), lambda g: (np.full(y.value.shape, g),))
    backward(total)
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_grad_check_linear_map_is_exact():
    rng = np.random.default_rng(10)
    w = Parameter(rng.standard_normal((3, 2)), "w")
    x = rng.standard_normal((4, 3))
    fn = lambda: Node(np.sum(x @ w.value), (w,), lambda g: (g * x.sum(axis=0)[:, None] * np.ones((3, 2)),))
    assert grad_check(fn, [w]) < 1e-9


def test_grad_check_conv_pelu_mse_composite():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 5, 5, 2))
    w = Parameter(rng.standard_normal((3, 3, 2, 3)) * 0.5, "w")
    a = Parameter(np.asarray(1.3), "a", "pelu")
    b = Parameter(np.asarray(0.8), "b", "pelu")
    t = rng.standard_normal((1, 5, 5, 3))
    assert grad_check(lambda: ops.mse(ops.pelu(ops.conv2d(Node(x), w), a, b), t), [w, a, b]) < 1e-5


def test_grad_check_catches_doubled_gradient():
    rng = np.random.default_rng(12)
    p = Parameter(rng.standard_normal(5), "p")
    t = rng.standard_normal(5)
    fn = lambda: ops.mse(p, t)
    for q in [p]:
        q.zero_grad()
    backward(fn())
    err = grad_check(fn, [p], analytic=[2 * p.grad.copy()])
    assert err == pytest.approx(0.5, abs=1e-6)


def test_grad_check_rejects_float32():
    p = Parameter(np.zeros(2, np.float32), "p")
    with pytest.raises(ValueError, match="float64"):
        grad_check(lambda: ops.mse(p, np.ones(2, np.float32)), [p])


def test_grad_check_names_parameter_on_non_finite_loss():
    p = Parameter(np.array([1.0]), "victim")
    fn = lambda: Node(np.log(p.value - 1.0 + 1e-6).sum(), (p,), lambda g: (g / (p.value - 1.0 + 1e-6),))
    with np.errstate(all="ignore"), pytest.raises(FloatingPointError, match="victim"):
        gradient_errors(fn, [p])


def test_forward_kernels_are_deterministic():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 6, 6, 3)).astype(np.float32)
    w = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
    first = kernels.conv2d_forward(x, w).tobytes()
    assert all(kernels.conv2d_forward(x, w).tobytes() == first for _ in range(3))
