import io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xattn.engine import (
    NonSmoothWarning,
    Tensor,
    add,
    backward,
    create,
    elementwise,
    expand,
    gelu,
    getitem,
    grad_check,
    layer_norm,
    masked_fill,
    matmul,
    mul,
    no_grad,
    permute,
    read_tensor,
    reduce,
    reduce_max,
    reduce_mean,
    reduce_min,
    reduce_sum,
    reshape,
    scale,
    sigmoid,
    softmax_lastdim,
    square,
    sub,
    take_rows,
    tensor_to_bytes,
    write_tensor,
)
from xattn.engine.io import FormatError

RNG = np.random.default_rng(1234)


def rand(*shape):
    return RNG.standard_normal(shape)


# ------------------------------------------------------------------ create
def test_create_valid():
    t = create([2, 2], [1, 2, 3, 4])
    assert t.shape == (2, 2)
    assert t.grad is None
    np.testing.assert_array_equal(t.data, [[1, 2], [3, 4]])


def test_create_length_mismatch_reports_both_sizes():
    with pytest.raises(ValueError, match=r"4 elements.*3"):
        create([2, 2], [1, 2, 3])


def test_create_scalar_like():
    t = create([1], [0.0])
    assert t.shape == (1,)
    assert t.item() == 0.0


# ------------------------------------------------------------------ matmul
def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][p] * b[p][j] for p in range(k)) for j in range(n)] for i in range(m)]


def test_matmul_identity():
    x = Tensor(rand(2, 3))
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), x).data, x.data)


def test_matmul_known_product_matches_loop_oracle():
    a = [[1.0, 2.0], [3.0, 4.0]]
    b = [[5.0, 6.0], [7.0, 8.0]]
    out = matmul(Tensor(np.array(a)), Tensor(np.array(b))).data
    assert naive_matmul(a, b) == [[19.0, 22.0], [43.0, 50.0]]
    np.testing.assert_array_equal(out, naive_matmul(a, b))


def test_matmul_grad_of_sum_is_row_broadcast_of_b_row_sums():
    a = Tensor(rand(3, 4), requires_grad=True)
    b = Tensor(rand(4, 5))
    backward(matmul(a, b).sum())
    expected = np.broadcast_to(b.data.sum(axis=1), (3, 4))
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)


def test_matmul_batched_and_shared_weight_paths_agree():
    a = rand(2, 3, 4)
    w = rand(4, 5)
    shared = matmul(Tensor(a), Tensor(w)).data
    batched = matmul(Tensor(a), Tensor(np.broadcast_to(w, (2, 4, 5)).copy())).data
    np.testing.assert_allclose(shared, batched, rtol=1e-12)


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError):
        matmul(Tensor(rand(2, 3)), Tensor(rand(2, 3)))


# ------------------------------------------------------------------ softmax
def test_softmax_symmetric():
    np.testing.assert_allclose(softmax_lastdim(Tensor(np.zeros(2))).data, [0.5, 0.5])


def test_softmax_large_logits_no_overflow():
    out = softmax_lastdim(Tensor(np.array([1000.0, 0.0]))).data
    assert np.all(np.isfinite(out))
    assert abs(out[0] - 1.0) < 1e-9 and abs(out[1]) < 1e-9


def test_softmax_matches_high_precision_scalar_oracle():
    import mpmath

    x = rand(4)
    mpmath.mp.dps = 40
    exps = [mpmath.e ** mpmath.mpf(float(v)) for v in x]
    total = sum(exps)
    oracle = [float(e / total) for e in exps]
    np.testing.assert_allclose(softmax_lastdim(Tensor(x)).data, oracle, atol=1e-9, rtol=0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    out = softmax_lastdim(Tensor(x)).data
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


# ------------------------------------------------------------- elementwise
def test_add_zero_is_identity():
    x = Tensor(rand(3))
    np.testing.assert_array_equal(elementwise("add", x, Tensor(np.zeros(3))).data, x.data)


def test_sigmoid_zero_is_half():
    assert elementwise("sigmoid", Tensor(np.array(0.0))).item() == 0.5


def test_square_gradient_at_three_is_six():
    x = Tensor(np.array([3.0]), requires_grad=True)
    backward(elementwise("square", x).sum())
    assert x.grad[0] == 6.0


def test_elementwise_dispatch_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        elementwise("mul", Tensor(rand(2, 3)), Tensor(rand(3, 2)))


def test_elementwise_unknown_op():
    with pytest.raises(ValueError):
        elementwise("pow", Tensor(rand(2)))


def test_sigmoid_extremes_are_finite():
    out = sigmoid(Tensor(np.array([-1e4, 1e4]))).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 17)
    oracle = [0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3))) for v in x]
    np.testing.assert_allclose(gelu(Tensor(x)).data, oracle, rtol=1e-12, atol=1e-15)


def test_masked_fill_blocks_gradient_at_filled_positions():
    x = Tensor(rand(2, 3), requires_grad=True)
    mask = np.array([[True, False, False], [False, False, True]])
    out = masked_fill(x, mask, 7.0)
    assert out.data[0, 0] == 7.0 and out.data[1, 2] == 7.0
    backward(out.sum())
    np.testing.assert_array_equal(x.grad, (~mask).astype(float))


# ------------------------------------------------------------------ reduce
def test_sum_known():
    assert reduce("sum", Tensor(np.array([1.0, 2.0, 3.0]))).item() == 6.0


def test_min_max_of_constant_map():
    c = Tensor(np.full((3, 3), 2.5))
    assert (reduce("min", c).item(), reduce("max", c).item()) == (2.5, 2.5)


def test_mean_over_axis_matches_scalar_loop():
    x = rand(2, 3)
    oracle = [sum(x[i][j] for i in range(2)) / 2 for j in range(3)]
    np.testing.assert_allclose(reduce("mean", Tensor(x), axes=0).data, oracle, rtol=1e-14)


def test_min_max_refuse_gradient():
    x = Tensor(rand(4), requires_grad=True)
    assert not reduce_min(x).requires_grad
    assert not reduce_max(x).requires_grad


def test_invalid_axis_rejected():
    with pytest.raises(ValueError):
        reduce_sum(Tensor(rand(2, 3)), axes=5)


# ------------------------------------------------------- reshape / permute
def test_reshape_round_trip():
    x = Tensor(rand(2, 3))
    np.testing.assert_array_equal(reshape(reshape(x, (3, 2)), (2, 3)).data, x.data)


def test_reshape_count_mismatch():
    with pytest.raises(ValueError, match="6 elements"):
        reshape(Tensor(rand(2, 3)), (4, 2))


def test_permute_inverse_is_identity():
    x = Tensor(rand(2, 3, 4))
    order = (2, 0, 1)
    inv = tuple(np.argsort(order))
    np.testing.assert_array_equal(permute(permute(x, order), inv).data, x.data)


def test_permute_gradient_matches_finite_differences():
    w = rand(4, 3, 2)
    err = grad_check(lambda x: (permute(x, (2, 0, 1)) * Tensor(w)).sum(), rand(3, 2, 4))
    assert err < 1e-8


def test_permute_rejects_non_permutation():
    with pytest.raises(ValueError):
        permute(Tensor(rand(2, 3)), (0, 0))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.randoms(use_true_random=False))
def test_permute_round_trip_property(shape, rnd):
    x = np.arange(math.prod(shape), dtype=np.float64).reshape(shape)
    order = list(range(len(shape)))
    rnd.shuffle(order)
    back = permute(permute(Tensor(x), order), tuple(np.argsort(order))).data
    np.testing.assert_array_equal(back, x)


# ---------------------------------------------------------------- backward
def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_unreached_leaf_keeps_no_gradient():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = Tensor(np.array([1.0]), requires_grad=True)
    backward((x * 2.0).sum())
    assert y.grad is None


def test_backward_rejects_non_scalar():
    x = Tensor(rand(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_repeated_backward_resets_instead_of_accumulating():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    first = x.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(x.grad, first)


def test_shared_subexpression_accumulates_within_one_pass():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    backward((y + y).sum())
    assert x.grad[0] == 12.0


def test_no_grad_records_nothing():
    x = Tensor(rand(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_deep_chain_has_no_recursion_limit():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    backward(y.sum())
    assert x.grad[0] == 1.0


# -------------------------------------------------------------- grad_check
def test_grad_check_linear_is_exact():
    assert grad_check(lambda x: x.sum(), rand(3, 2)) < 1e-8


def test_grad_check_sum_of_squares():
    assert grad_check(lambda x: square(x).sum(), rand(4), epsilon=1e-5) < 1e-6


def test_grad_check_flags_min_max_and_skips():
    with pytest.warns(NonSmoothWarning):
        assert grad_check(lambda x: (x - reduce_min(x)).sum(), rand(3)) is None


def test_grad_check_frozen_min_max_checks_the_engine_gradient():
    f = lambda x: square(mul(sub(x, reduce_min(x)), Tensor(1.0 / 3.0))).sum()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert grad_check(f, rand(5), freeze_nonsmooth=True) < 1e-7


# every differentiable op, 64-bit, random shapes up to 4x4x4
SHAPES = st.lists(st.integers(1, 4), min_size=1, max_size=3).map(tuple)


def _weights(shape):
    return Tensor(np.random.default_rng(len(shape)).standard_normal(shape))


OPS = {
    "add": lambda x: (add(x, Tensor(np.ones(x.shape) * 0.3)) * _weights(x.shape)).sum(),
    "add_broadcast": lambda x: (add(x, Tensor(np.array(0.7))) * _weights(x.shape)).sum(),
    "sub": lambda x: (sub(Tensor(np.ones(x.shape)), x) * _weights(x.shape)).sum(),
    "mul": lambda x: mul(x, x * _weights(x.shape)).sum(),
    "scale": lambda x: (scale(x, -1.7) * _weights(x.shape)).sum(),
    "square": lambda x: (square(x) * _weights(x.shape)).sum(),
    "sigmoid": lambda x: (sigmoid(x) * _weights(x.shape)).sum(),
    "gelu": lambda x: (gelu(x) * _weights(x.shape)).sum(),
    "softmax": lambda x: (softmax_lastdim(x) * _weights(x.shape)).sum(),
    "sum_axis": lambda x: square(reduce_sum(x, axes=-1)).sum(),
    "mean": lambda x: square(reduce_mean(x, axes=0)).sum(),
    "reshape": lambda x: (reshape(x, (-1,)) * _weights((x.size,))).sum(),
    "permute": lambda x: (permute(x, tuple(reversed(range(x.ndim)))) * _weights(tuple(reversed(x.shape)))).sum(),
    "expand": lambda x: (expand(x, (2,) + x.shape) * _weights((2,) + x.shape)).sum(),
    "getitem": lambda x: square(getitem(x, (slice(None),) * (x.ndim - 1) + (0,))).sum(),
    "masked_fill": lambda x: square(masked_fill(x, _weights(x.shape).data > 0, 0.5)).sum(),
    "matmul": lambda x: square(matmul(reshape(x, (1, -1)), _weights((x.size, 2)))).sum(),
    "layer_norm": lambda x: (layer_norm(x, Tensor(np.linspace(0.5, 1.5, x.shape[-1])),
                                        Tensor(np.linspace(-0.2, 0.2, x.shape[-1])))
                             * _weights(x.shape)).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=5, deadline=None)
@given(shape=SHAPES, seed=st.integers(0, 2**16))
def test_every_op_passes_grad_check(name, shape, seed):
    if name == "layer_norm" and shape[-1] < 2:
        shape = shape[:-1] + (2,)
    x = np.random.default_rng(seed).standard_normal(shape)
    assert grad_check(OPS[name], x) < 1e-4


def test_matmul_grad_check_both_operands():
    b = rand(3, 2)
    assert grad_check(lambda a: square(matmul(a, Tensor(b))).sum(), rand(2, 4, 3)) < 1e-4
    a = rand(2, 4, 3)
    assert grad_check(lambda w: square(matmul(Tensor(a), w)).sum(), b) < 1e-4


def test_take_rows_grad_check():
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    assert grad_check(lambda t: square(take_rows(t, ids)).sum(), rand(4, 3)) < 1e-4


# ---------------------------------------------------------------------- io
def test_serialization_layout_is_documented_little_endian():
    raw = tensor_to_bytes(np.array([[1.0, 2.0]], dtype=np.float32))
    assert raw[:4] == b"XATN"
    assert raw[4:6] == (1).to_bytes(2, "little")
    assert raw[6] == 0 and raw[7] == 2
    assert raw[8:16] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(raw[16:], dtype="<f4").tolist() == [1.0, 2.0]


@settings(max_examples=30, deadline=None)
@given(arrays(st.sampled_from([np.float32, np.float64]), SHAPES,
              elements=st.floats(-1e6, 1e6, width=32)))
def test_serialization_round_trip(arr):
    buf = io.BytesIO()
    write_tensor(buf, arr)
    write_tensor(buf, arr * 2)
    buf.seek(0)
    a = read_tensor(buf).data
    b = read_tensor(buf).data
    assert a.dtype == arr.dtype
    np.testing.assert_array_equal(a, arr)
    np.testing.assert_array_equal(b, arr * 2)


def test_serialization_rejects_garbage_and_truncation():
    with pytest.raises(FormatError):
        read_tensor(io.BytesIO(b"NOPE0000"))
    raw = tensor_to_bytes(np.ones(4, dtype=np.float64))
    with pytest.raises(FormatError, match="truncated"):
        read_tensor(io.BytesIO(raw[:-3]))
