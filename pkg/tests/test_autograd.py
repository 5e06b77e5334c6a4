import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetprune.autograd import (
    ShapeError,
    Tensor,
    add,
    batchnorm2d,
    binarize_ste,
    conv2d,
    global_avg_pool,
    masked_conv2d,
    matmul,
    max_pool2d,
    mul,
    no_grad,
    relu,
    softmax_cross_entropy,
    sum_all,
)
from budgetprune.autograd._kernels import scaled_conv_forward
from budgetprune.gradcheck import CASES, check_gradients, relative_error, run_suite

from oracles import conv_nested, cross_entropy_direct


def test_one_by_one_conv_is_scalar_product():
    out = conv2d(Tensor([[[[2.0]]]]), Tensor([[[[3.0]]]]))
    assert out.data.tolist() == [[[[6.0]]]]


def test_conv_of_ones_sums_the_window():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_output_size_and_padding():
    out = conv2d(Tensor(np.zeros((2, 3, 7, 7))), Tensor(np.zeros((4, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (2, 4, 4, 4)


def test_conv_channel_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_non_integral_output_size():
    with pytest.raises(ShapeError, match="non-integral"):
        conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)


def _random_conv_case(gen):
    n, c, h = int(gen.integers(1, 3)), int(gen.integers(1, 5)), int(gen.integers(3, 9))
    o, k = int(gen.integers(1, 4)), int(gen.choice([1, 3]))
    pad = int(gen.integers(0, 2))
    stride = 1 if (h + 2 * pad - k) % 2 else int(gen.integers(1, 3))
    return gen.standard_normal((n, c, h, h)), gen.standard_normal((o, c, k, k)), stride, pad


def test_conv_matches_nested_loop_oracle_bit_for_bit():
    gen = np.random.default_rng(101)
    for _ in range(25):
        x, k, stride, pad = _random_conv_case(gen)
        got = conv2d(Tensor(x), Tensor(k), stride, pad).data
        assert np.array_equal(got, conv_nested(x, k, stride, pad))


def test_numpy_fallback_matches_compiled_kernel():
    gen = np.random.default_rng(5)
    for _ in range(10):
        x, k, stride, _ = _random_conv_case(gen)
        s = gen.uniform(-1, 1, size=x.shape[1])
        ho = (x.shape[2] - k.shape[2]) // stride + 1
        a = scaled_conv_forward(x, k, s, stride, (ho, ho), use_numba=False)
        b = scaled_conv_forward(x, k, s, stride, (ho, ho), use_numba=True)
        assert np.array_equal(a, b)


def test_relu_definition():
    assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_uniform_logits_cross_entropy_is_ln2():
    loss = softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_matches_direct_formula():
    gen = np.random.default_rng(2)
    z, y = gen.standard_normal((4, 5)), gen.integers(0, 5, size=4)
    assert softmax_cross_entropy(Tensor(z), y).item() == pytest.approx(cross_entropy_direct(z, y), rel=1e-12)


def test_label_out_of_range_rejected():
    with pytest.raises(ValueError, match="label"):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_backward_of_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    sum_all(mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_constant_leaf_gets_no_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    sum_all(mul(x, c)).backward()
    assert c.grad is None
    assert x.grad.tolist() == [3.0, 4.0]


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        mul(x, x).backward()


def test_repeated_backward_accumulates():
    x = Tensor([1.0, -1.0], requires_grad=True)
    for _ in range(2):
        sum_all(mul(x, Tensor([2.0, 3.0]))).backward()
    assert x.grad.tolist() == [4.0, 6.0]


def test_diamond_graph_sums_both_paths():
    x = Tensor([1.5], requires_grad=True)
    shared = mul(x, x)
    sum_all(add(shared, mul(shared, Tensor(3.0)))).backward()
    # d/dx (x^2 + 3 x^2) = 8x
    assert x.grad.tolist() == [12.0]


def test_every_reachable_leaf_has_a_grad_shaped_like_data():
    gen = np.random.default_rng(0)
    x = Tensor(gen.standard_normal((2, 3, 5, 5)), requires_grad=True)
    k = Tensor(gen.standard_normal((4, 3, 3, 3)), requires_grad=True)
    s = Tensor(gen.uniform(size=3), requires_grad=True)
    w = Tensor(gen.standard_normal((4, 2)), requires_grad=True)
    out = matmul(global_avg_pool(relu(masked_conv2d(x, k, s, 1, 1))), w)
    sum_all(out).backward()
    for t in (x, k, s, w):
        assert t.grad is not None and t.grad.shape == t.data.shape


def test_no_grad_records_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_no_grad_is_thread_local():
    seen = []
    with no_grad():
        t = threading.Thread(target=lambda: seen.append(mul(Tensor([1.0], requires_grad=True), 2.0).requires_grad))
        t.start()
        t.join()
    assert seen == [True]


def test_only_scalar_broadcasting():
    with pytest.raises(ShapeError):
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    assert add(Tensor(np.zeros((2, 3))), 1.0).data.sum() == 6.0


def test_zero_dim_tensor_keeps_its_shape():
    assert Tensor(np.array(2.5)).shape == ()


def test_max_pool_and_gap():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    assert max_pool2d(x, 2).data.reshape(-1).tolist() == [5.0, 7.0, 13.0, 15.0]
    assert global_avg_pool(x).data.tolist() == [[7.5]]


def test_batchnorm_eval_centres_a_constant_channel():
    x = Tensor(np.full((2, 1, 3, 3), 4.0))
    out = batchnorm2d(x, Tensor([1.0]), Tensor([0.0]), np.array([4.0]), np.array([1.0]), training=False)
    assert np.array_equal(out.data, np.zeros_like(x.data))


def test_batchnorm_train_standardizes_and_updates_running_stats():
    gen = np.random.default_rng(3)
    x = gen.standard_normal((4, 2, 3, 3)) * 3 + 2
    rm, rv = np.zeros(2), np.ones(2)
    out = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    assert np.allclose(out.data.var(axis=(0, 2, 3)), x.var(axis=(0, 2, 3)) / (x.var(axis=(0, 2, 3)) + 1e-5))
    assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    m = x.shape[0] * x.shape[2] * x.shape[3]
    assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_ste_forward_is_hard_and_backward_is_clipped_identity():
    s = Tensor([-2.0, -0.5, 0.0, 0.3, 1.5], requires_grad=True)
    b = binarize_ste(s, 0.0, 1.0)
    assert b.data.tolist() == [0.0, 0.0, 0.0, 1.0, 1.0]
    sum_all(mul(b, Tensor([1.0, 2.0, 3.0, 4.0, 5.0]))).backward()
    assert s.grad.tolist() == [0.0, 2.0, 3.0, 4.0, 0.0]


def test_relative_error_definition():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.5])) == pytest.approx(0.5 / 2.5)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_gradcheck_detects_a_wrong_gradient():
    x = Tensor([0.7, -1.2], requires_grad=True)

    def fn():
        y = mul(x, x)
        # tamper with the recorded backward: report half the true gradient
        orig = y._backward
        y._backward = lambda g: tuple(0.5 * v for v in orig(g))
        return sum_all(y)
    err, _ = check_gradients(fn, [x])
    assert err > 0.1


@pytest.mark.parametrize("name", sorted(CASES))
def test_finite_differences_per_op(name):
    results = run_suite(repeats=2, seed=11, names=[name])
    for r in results:
        assert r.passed, f"{r.name}: relative error {r.rel_error:.3e}"


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_conv_is_linear_in_the_input(seed):
    gen = np.random.default_rng(seed)
    x1, k, stride, pad = _random_conv_case(gen)
    x2 = gen.standard_normal(x1.shape)
    lhs = conv2d(Tensor(x1 + 2.0 * x2), Tensor(k), stride, pad).data
    rhs = conv2d(Tensor(x1), Tensor(k), stride, pad).data + 2.0 * conv2d(Tensor(x2), Tensor(k), stride, pad).data
    assert np.allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_masked_conv_equals_sum_of_scaled_channel_convs(seed):
    gen = np.random.default_rng(seed)
    x, k, stride, pad = _random_conv_case(gen)
    s = gen.uniform(-1, 1, size=x.shape[1])
    got = masked_conv2d(Tensor(x), Tensor(k), Tensor(s), stride, pad).data
    parts = sum(s[c] * conv2d(Tensor(x[:, c:c + 1]), Tensor(k[:, c:c + 1]), stride, pad).data
                for c in range(x.shape[1]))
    assert np.allclose(got, parts, atol=1e-10)
