import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from se2mitosis import tensor as T
from se2mitosis.tensor import ShapeError, Tensor

import gradcases
from conftest import FD_TOL
from oracles import bce_direct, bn_formula, conv_loops, linear_loops, pool_loops


# ---------------------------------------------------------------- Tensor


def test_tensor_rejects_zero_extent():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_tensor_integer_data_promoted_to_float():
    assert Tensor([1, 2]).dtype == np.float64


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.mul(x, 2.0).backward()


def test_sum_gradient_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_missing_path_gives_no_gradient_not_error():
    x = Tensor(np.ones(2), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    T.sum_all(x).backward()
    assert y.grad is None


def test_shared_leaf_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.sum_all(T.add(T.mul(x, 3.0), x)).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


# ---------------------------------------------------------------- conv2d_valid


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 3, 3))
    out = T.conv2d_valid(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out.data, x)


def test_conv_lifting_row_shape():
    out = T.conv2d_valid(np.zeros((3, 77, 77)), np.zeros((16, 3, 4, 4)))
    assert out.shape == (16, 74, 74)


def test_conv_matches_loop_oracle_exactly_on_dyadic_inputs():
    # dyadic values make every partial sum exact, so summation order cannot matter
    rng = np.random.default_rng(1)
    x = rng.integers(-8, 9, (3, 5, 5)) / 4.0
    k = rng.integers(-8, 9, (2, 3, 2, 2)) / 8.0
    b = rng.integers(-4, 5, 2) / 2.0
    np.testing.assert_array_equal(T.conv2d_valid(x, k, b).data, conv_loops(x, k, b))


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_loop_oracle_random(seed):
    rng = np.random.default_rng(seed)
    ci, co, kk = rng.integers(1, 6, 3)
    x = rng.normal(size=(ci, kk + rng.integers(0, 5), kk + rng.integers(0, 5)))
    k = rng.normal(size=(co, ci, kk, kk))
    b = rng.normal(size=co)
    np.testing.assert_allclose(T.conv2d_valid(x, k, b).data, conv_loops(x, k, b), rtol=0, atol=1e-12)


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 2, 6, 6))
    k = rng.normal(size=(4, 2, 3, 3))
    out = T.conv2d_valid(x, k).data
    for i in range(3):
        np.testing.assert_allclose(out[i], conv_loops(x[i], k), atol=1e-12)


@pytest.mark.parametrize("xs,ks", [((3, 5, 5), (2, 2, 2, 2)), ((3, 2, 2), (1, 3, 3, 3)), ((3, 5, 5), (3, 2, 2))])
def test_conv_shape_errors_name_both_shapes(xs, ks):
    with pytest.raises(ShapeError) as info:
        T.conv2d_valid(np.zeros(xs), np.zeros(ks))
    assert str(ks) in str(info.value)


def test_conv_mismatch_message_names_input_shape():
    with pytest.raises(ShapeError) as info:
        T.conv2d_valid(np.zeros((3, 5, 5)), np.zeros((2, 2, 2, 2)))
    assert "(3, 5, 5)" in str(info.value) or "(1, 3, 5, 5)" in str(info.value)


def test_conv_bad_bias():
    with pytest.raises(ShapeError):
        T.conv2d_valid(np.zeros((1, 3, 3)), np.zeros((2, 1, 1, 1)), np.zeros(3))


# ---------------------------------------------------------------- max_pool2


def test_pool_example():
    out = T.max_pool2(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    np.testing.assert_array_equal(out.data, [[[4.0]]])


def test_pool_first_row_shape():
    assert T.max_pool2(np.zeros((8 * 16, 74, 74))).shape == (128, 37, 37)


@pytest.mark.parametrize("seed", range(5))
def test_pool_matches_oracle_odd_edges_dropped(seed):
    x = np.random.default_rng(seed).normal(size=(2, 5, 5))
    np.testing.assert_array_equal(T.max_pool2(x).data, pool_loops(x))


def test_pool_tie_gradient_goes_to_first_in_row_major_order():
    x = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    T.sum_all(T.max_pool2(x)).backward()
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_pool_rejects_small_input():
    with pytest.raises(ShapeError):
        T.max_pool2(np.zeros((1, 1, 4)))


# ---------------------------------------------------------------- batch_norm


def test_bn_infer_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 2, 2))
    out = T.batch_norm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=False, eps=1e-300)
    np.testing.assert_allclose(out.data, x, rtol=1e-15)


def test_bn_train_standardizes():
    x = np.random.default_rng(1).normal(3.0, 5.0, size=(4, 3, 5, 5))
    out = T.batch_norm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)  # eps shifts the variance slightly


def test_bn_matches_formula_oracle():
    rng = np.random.default_rng(2)
    x, g, b = rng.normal(size=(3, 4, 2, 2)), rng.normal(size=4), rng.normal(size=4)
    out = T.batch_norm(x, g, b, np.zeros(4), np.ones(4), training=True, eps=1e-5)
    np.testing.assert_allclose(out.data, bn_formula(x, g, b, 1e-5), atol=1e-12)


def test_bn_running_stats_update():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, training=True, momentum=0.1)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_bn_zero_variance_is_finite():
    out = T.batch_norm(np.full((2, 1, 2, 2), 7.0), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), True)
    assert np.all(np.isfinite(out.data)) and np.all(out.data == 0)


def test_bn_rejects_bad_eps_and_tiny_batch():
    with pytest.raises(ValueError):
        T.batch_norm(np.zeros((2, 1)), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), True, eps=0)
    with pytest.raises(ShapeError):
        T.batch_norm(np.zeros((1, 1)), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), True)


# ---------------------------------------------------------------- leaky_relu / linear / bce


def test_leaky_example():
    out = T.leaky_relu(np.array([-1.0, 0.0, 2.0]), 0.01)
    np.testing.assert_allclose(out.data, [-0.01, 0.0, 2.0], rtol=1e-15)


def test_leaky_alpha_one_identity():
    x = np.random.default_rng(0).normal(size=10)
    np.testing.assert_array_equal(T.leaky_relu(x, 1.0).data, x)


def test_leaky_subgradient_one_at_zero():
    x = Tensor(np.array([0.0, -2.0]), requires_grad=True)
    T.sum_all(T.leaky_relu(x, 0.01)).backward()
    np.testing.assert_allclose(x.grad, [1.0, 0.01])


def test_linear_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(T.linear(x, np.eye(4), np.zeros(4)).data, x)


def test_linear_fc_rows_shapes():
    h = T.linear(np.zeros((5, 32)), np.zeros((64, 32)), np.zeros(64))
    assert T.linear(h, np.zeros((1, 64)), np.zeros(1)).shape == (5, 1)


def test_linear_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(2, 5)), rng.normal(size=2)
    np.testing.assert_allclose(T.linear(x, w, b).data, linear_loops(x, w, b), atol=1e-12)


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        T.linear(np.zeros((2, 3)), np.zeros((4, 2)))


def test_bce_confident_correct_is_zero():
    assert T.bce_with_logits(np.array([50.0]), np.array([1.0])).item() < 1e-6


@pytest.mark.parametrize("y", [0.0, 1.0])
def test_bce_zero_logit_is_ln2(y):
    assert T.bce_with_logits(np.array([0.0]), np.array([y])).item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_matches_direct_oracle():
    rng = np.random.default_rng(4)
    z = rng.uniform(-10, 10, 200)
    y = rng.integers(0, 2, 200).astype(float)
    assert abs(T.bce_with_logits(z, y).item() - bce_direct(z, y)) < 1e-9


def test_bce_extreme_logits_finite():
    out = T.bce_with_logits(np.array([1e4, -1e4]), np.array([0.0, 1.0]))
    assert out.item() == pytest.approx(1e4)


def test_bce_rejects_bad_labels():
    with pytest.raises(ValueError):
        T.bce_with_logits(np.zeros(2), np.array([0.0, 0.5]))
    with pytest.raises(ShapeError):
        T.bce_with_logits(np.zeros(2), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)),
       st.lists(st.integers(0, 1), min_size=20, max_size=20))
def test_bce_nonnegative(z, labels):
    y = np.array(labels[: z.size], dtype=float)
    assert T.bce_with_logits(z, y).item() >= 0


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("case", gradcases.CASES, ids=lambda c: c.__name__)
def test_finite_difference(case):
    rng = np.random.default_rng(zlib.crc32(case.__name__.encode()))
    for _ in range(3):
        name, err = gradcases.run_case(case, rng)
        assert err < FD_TOL, f"{name}: relative error {err:.2e}"


def test_backward_deterministic():
    rng = np.random.default_rng(7)
    x, k = rng.normal(size=(2, 3, 9, 9)), rng.normal(size=(4, 3, 3, 3))

    def grads():
        xt, kt = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
        out = T.max_pool2(T.leaky_relu(T.conv2d_valid(xt, kt), 0.01))
        T.sum_all(T.mul(out, out)).backward()
        return xt.grad, kt.grad

    a, b = grads(), grads()
    for ga, gb in zip(a, b):
        assert ga.tobytes() == gb.tobytes()
