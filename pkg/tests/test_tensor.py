import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from camkit import tensor as T
from camkit.tensor import Tensor
from gradcheck import check_grads, leaf, probe
from oracles import conv2d_loops, depthwise_loops, pool_loops

F64 = np.float64


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


# --- conv2d -----------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.ones((1, 4, 4))
    out = T.conv2d(t64(x), t64(np.ones((1, 1, 1, 1))), t64([0.0]))
    assert np.array_equal(out.data, x)


def test_conv_zero_weights_give_zero():
    rng = np.random.default_rng(0)
    out = T.conv2d(t64(rng.normal(size=(3, 6, 6))), t64(np.zeros((2, 3, 3, 3))), t64(np.zeros(2)))
    assert not out.data.any()


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_matches_nested_loops(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x, w, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    got = T.conv2d(t64(x), t64(w), t64(b), stride=stride, padding=padding).data
    want = conv2d_loops(x, w, b, stride, padding)
    assert got.shape == want.shape
    assert np.abs(got - want).max() / np.abs(want).max() <= 1e-12


def test_conv_output_extent():
    out = T.conv2d(t64(np.zeros((1, 9, 7))), t64(np.zeros((1, 1, 3, 3))), stride=2)
    assert out.shape == (1, (9 - 3) // 2 + 1, (7 - 3) // 2 + 1)


def test_conv_batched_matches_single():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(4, 2, 6, 6)), rng.normal(size=(3, 2, 2, 2))
    batched = T.conv2d(t64(x), t64(w), stride=2).data
    for i in range(4):
        assert np.array_equal(batched[i], T.conv2d(t64(x[i]), t64(w), stride=2).data)


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 5, 5\).*\(3, 4, 3, 3\)"):
        T.conv2d(t64(np.zeros((2, 5, 5))), t64(np.zeros((3, 4, 3, 3))))
    with pytest.raises(T.DimensionError):
        T.conv2d(t64(np.zeros((1, 2, 2))), t64(np.zeros((1, 1, 3, 3))))
    with pytest.raises(T.DimensionError):
        T.conv2d(t64(np.zeros((1, 4, 4))), t64(np.zeros((1, 1, 3, 3))), stride=0)


@settings(max_examples=40, deadline=None)
@given(
    a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**31 - 1), stride=st.integers(1, 3)
)
def test_conv_is_linear(a, b, seed, stride):
    rng = np.random.default_rng(seed)
    x, y, w = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 6, 6)), t64(rng.normal(size=(3, 2, 3, 3)))
    lhs = T.conv2d(t64(a * x + b * y), w, stride=stride).data
    rhs = a * T.conv2d(t64(x), w, stride=stride).data + b * T.conv2d(t64(y), w, stride=stride).data
    assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, np.abs(rhs).max())


# --- depthwise --------------------------------------------------------------

def test_depthwise_identity_filters():
    x = np.random.default_rng(0).normal(size=(3, 4, 4))
    assert np.array_equal(T.depthwise_conv2d(t64(x), t64(np.ones((3, 1, 1, 1)))).data, x)


def test_depthwise_matches_per_channel_loops():
    rng = np.random.default_rng(1)
    x, f = rng.normal(size=(4, 6, 6)), rng.normal(size=(4, 1, 3, 3))
    got = T.depthwise_conv2d(t64(x), t64(f)).data
    assert np.abs(got - depthwise_loops(x, f)).max() <= 1e-12 * np.abs(got).max()


def test_depthwise_channel_multiplier_and_stride():
    rng = np.random.default_rng(2)
    x, f = rng.normal(size=(2, 8, 8)), rng.normal(size=(6, 1, 2, 2))
    got = T.depthwise_conv2d(t64(x), t64(f), stride=2, padding=1).data
    assert np.allclose(got, depthwise_loops(x, f, 2, 1), rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.integers(1, 5))
def test_depthwise_permutation_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    x, f = rng.normal(size=(c, 5, 5)), rng.normal(size=(c, 1, 3, 3))
    perm = rng.permutation(c)
    base = T.depthwise_conv2d(t64(x), t64(f)).data
    permuted = T.depthwise_conv2d(t64(x[perm]), t64(f[perm])).data
    assert np.array_equal(permuted, base[perm])


def test_depthwise_channel_mismatch():
    with pytest.raises(T.DimensionError):
        T.depthwise_conv2d(t64(np.zeros((3, 4, 4))), t64(np.zeros((4, 1, 3, 3))))


def test_channel_output_depends_only_on_its_input():
    rng = np.random.default_rng(4)
    x, f = rng.normal(size=(3, 5, 5)), rng.normal(size=(3, 1, 3, 3))
    y = x.copy()
    y[1] += 10.0
    a, b = T.depthwise_conv2d(t64(x), t64(f)).data, T.depthwise_conv2d(t64(y), t64(f)).data
    assert np.array_equal(a[[0, 2]], b[[0, 2]]) and not np.array_equal(a[1], b[1])


# --- channel mean / pooling --------------------------------------------------

def test_channel_mean_examples():
    x = np.random.default_rng(0).normal(size=(1, 3, 3))
    assert np.array_equal(T.channel_mean(t64(x)).data, x)
    sym = np.stack([np.full((3, 3), 2.5), np.full((3, 3), -2.5)])
    assert not T.channel_mean(t64(sym)).data.any()
    r = np.random.default_rng(1).normal(size=(5, 3, 3))
    want = np.array([[[math.fsum(r[:, i, j]) / 5 for j in range(3)] for i in range(3)]])
    assert np.allclose(T.channel_mean(t64(r)).data, want, rtol=0, atol=1e-15)


def test_channel_mean_empty():
    with pytest.raises(T.EmptyTensorError):
        T.channel_mean(t64(np.zeros((0, 3, 3))))


def test_pool_identity_constant_and_global_mean():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 7, 7))
    assert np.array_equal(T.adaptive_avg_pool(t64(x), (7, 7)).data, x)
    const = T.adaptive_avg_pool(t64(np.full((3, 6, 5), 0.37)), (4, 3)).data
    assert np.allclose(const, 0.37, rtol=0, atol=1e-15)
    g = T.adaptive_avg_pool(t64(x), (1, 1)).data
    assert np.allclose(g[:, 0, 0], [math.fsum(c.ravel()) / 49 for c in x], rtol=0, atol=1e-14)


@pytest.mark.parametrize("out", [(1, 1), (2, 3), (3, 2), (5, 4), (7, 6)])
def test_pool_matches_window_oracle(out):
    x = np.random.default_rng(sum(out)).normal(size=(2, 7, 6))
    assert np.allclose(T.adaptive_avg_pool(t64(x), out).data, pool_loops(x, *out), rtol=0, atol=1e-13)


def test_pool_rejects_oversized_output():
    with pytest.raises(T.DimensionError):
        T.adaptive_avg_pool(t64(np.zeros((1, 3, 3))), (4, 1))


# --- backward contract -------------------------------------------------------

def test_grad_of_sum_is_ones():
    w = t64(np.random.default_rng(0).normal(size=(3, 4)), grad=True)
    grads = T.backward(T.tsum(w))
    assert np.array_equal(w.grad, np.ones((3, 4)))
    assert len(grads) == 1


def test_grad_of_half_square_is_w():
    w = t64(np.random.default_rng(1).normal(size=5), grad=True)
    w.name = "w"
    grads = T.backward(T.tsum(w * w) * 0.5)
    assert np.allclose(grads["w"], w.data, rtol=0, atol=1e-15)


def test_grads_accumulate_over_uses():
    w = t64([1.0, 2.0], grad=True)
    T.backward(T.tsum(w * 3.0 + w * w))
    assert np.allclose(w.grad, 3.0 + 2 * w.data)


def test_backward_errors():
    w = t64(np.ones(3), grad=True)
    with pytest.raises(T.GradContractError):
        T.backward(w * 2.0)
    loss = T.tsum(w * 2.0)
    T.backward(loss)
    with pytest.raises(T.StaleGraphError):
        T.backward(loss)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_results_raise():
    with pytest.raises(T.NonFiniteError):
        T.log(t64([0.0, 1.0]))
    with pytest.raises(T.NonFiniteError):
        t64([1e300]) * 1e300


def test_finite_diff_examples():
    p = t64([3.0])
    assert abs(T.finite_diff_grad(lambda q: q, p)[0] - 1.0) < 1e-9
    assert abs(T.finite_diff_grad(lambda q: q * q, p, 1e-5)[0] - 6.0) < 1e-8
    with pytest.raises(ValueError):
        T.finite_diff_grad(lambda q: q, p, 0.0)
    with pytest.raises(FloatingPointError):
        T.finite_diff_grad(lambda q: float("nan"), p)


def test_tensor_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    assert t.size == int(np.prod(t.shape))
    T.backward(T.tsum(t * t))
    assert t.grad.shape == t.shape


@settings(max_examples=50, deadline=None)
@given(arrays(F64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-5, 5)))
def test_elementwise_ops_are_deterministic(a):
    x, y = t64(a), t64(a)
    f = lambda t: T.tsum(T.gelu(t) * T.exp(t * 0.1) + t * t)  # noqa: E731
    assert f(x).data.tobytes() == f(y).data.tobytes()


# --- gradient checks, 20 random instances per op ----------------------------

SEEDS = range(20)


def _conv_case(seed):
    rng = np.random.default_rng(seed)
    c, o, k = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 4)
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x, w, b = leaf(rng, c, 5, 5), leaf(rng, o, c, k, k), leaf(rng, o)
    out_shape = T.conv2d(x, w, b, stride, pad).shape
    pr = probe(rng, out_shape)
    return (lambda: T.tsum(T.conv2d(x, w, b, stride, pad) * pr)), [x, w, b]


def _depthwise_case(seed):
    rng = np.random.default_rng(seed)
    c, m, k = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    x, f = leaf(rng, 1, c, 5, 5), leaf(rng, c * m, 1, k, k)
    stride = int(rng.integers(1, 3))
    pr = probe(rng, T.depthwise_conv2d(x, f, stride).shape)
    return (lambda: T.tsum(T.depthwise_conv2d(x, f, stride) * pr)), [x, f]


def _pool_case(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 2, 2, 7, 6)
    out = (int(rng.integers(1, 8)), int(rng.integers(1, 7)))
    pr = probe(rng, (2, 2) + out)
    return (lambda: T.tsum(T.adaptive_avg_pool(x, out) * pr)), [x]


def _mean_case(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, int(rng.integers(1, 6)), 3, 3)
    pr = probe(rng, (1, 3, 3))
    return (lambda: T.tsum(T.channel_mean(x) * pr)), [x]


def _bn_case(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 4))
    x, g, b = leaf(rng, 3, c, 3, 3), leaf(rng, c), leaf(rng, c)
    rm, rv = np.zeros(c), np.ones(c)
    pr = probe(rng, (3, c, 3, 3))
    return (lambda: T.tsum(T.batch_norm(x, g, b, rm.copy(), rv.copy(), training=True) * pr)), [x, g, b]


def _bn_eval_case(seed):
    rng = np.random.default_rng(seed)
    x, g, b = leaf(rng, 2, 3, 2, 2), leaf(rng, 3), leaf(rng, 3)
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, 3)
    pr = probe(rng, (2, 3, 2, 2))
    return (lambda: T.tsum(T.batch_norm(x, g, b, rm, rv, training=False) * pr)), [x, g, b]


def _gelu_case(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 4, 5)
    pr = probe(rng, (4, 5))
    return (lambda: T.tsum(T.gelu(x) * pr)), [x]


def _matmul_norm_case(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 4, 3), leaf(rng, 3, 5)
    pr = probe(rng, (4, 5))
    return (lambda: T.tsum(T.l2_normalize(a @ b, axis=1) * pr) + T.tsum(T.logsumexp(a @ b, axis=1))), [a, b]


def _index_concat_case(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 3, 4), leaf(rng, 2, 4)
    idx = rng.integers(0, 5, size=7)
    pr = probe(rng, (7, 4))
    return (lambda: T.tsum(T.concat([a, b], axis=0)[idx] * pr) + T.tsum(T.stack([a[0], b[1]]) ** 2)), [a, b]


CASES = {
    "conv2d": _conv_case,
    "depthwise_conv2d": _depthwise_case,
    "adaptive_avg_pool": _pool_case,
    "channel_mean": _mean_case,
    "batch_norm_train": _bn_case,
    "batch_norm_eval": _bn_eval_case,
    "gelu": _gelu_case,
    "matmul_normalize_logsumexp": _matmul_norm_case,
    "index_concat_stack": _index_concat_case,
}


@pytest.mark.parametrize("op", sorted(CASES))
def test_gradients_match_finite_differences(op):
    worst = 0.0
    for seed in SEEDS:
        fn, params = CASES[op](seed)
        assert sum(p.size for p in params) <= 200
        worst = max(worst, check_grads(fn, params))
    assert worst <= 1e-4, f"{op}: worst relative error {worst:.2e}"
