import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import gradcases
from mflow import tensor as T
from mflow.errors import CheckerboardRisk, NotScalar, ShapeMismatch
from mflow.tensor import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def conv_reference(x, w, b, s, p):
    """Direct window loops, cross-correlation."""
    x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho, wo = (h - kh) // s + 1, (wd - kw) // s + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            win = x[:, :, i * s:i * s + kh, j * s:j * s + kw]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", win, w)
    return out + (0 if b is None else b[None, :, None, None])


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("name", sorted(gradcases.OP_CASES))
def test_op_gradient_finite_difference(name):
    assert gradcases.OP_CASES[name]() < gradcases.OP_TOL


def test_relu_gradient_linear_region():
    x = t64([[[[2.0]]]], grad=True)
    T.backward(T.sum_all(T.relu(x)))
    assert x.grad.item() == 1.0


def test_detached_loss_gives_zero_grads():
    x = t64(np.ones((1, 1, 2, 2)), grad=True)
    loss = T.sum_all(x.detach())
    assert T.backward(loss, [x])[0].tolist() == np.zeros((1, 1, 2, 2)).tolist()


def test_backward_needs_scalar():
    x = t64(np.ones((1, 1, 2, 2)), grad=True)
    with pytest.raises(NotScalar):
        T.backward(T.relu(x))
    T.current_record().clear()


def test_gradients_accumulate_across_uses():
    x = t64([[[[3.0]]]], grad=True)
    T.backward(T.sum_all(T.add(T.mul(x, 2.0), T.mul(x, x))))
    assert x.grad.item() == pytest.approx(2.0 + 6.0)


def test_backward_clears_record():
    x = t64(np.ones((1, 1, 2, 2)), grad=True)
    T.backward(T.sum_all(T.relu(x)))
    assert len(T.current_record()) == 0


def test_no_grad_records_nothing():
    x = t64(np.ones((1, 1, 2, 2)), grad=True)
    with T.no_grad():
        y = T.relu(x)
    assert not y.requires_grad and len(T.current_record()) == 0


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    w = np.eye(3)[:, :, None, None]
    out = T.conv2d(t64(x), t64(w), t64(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_conv_window_sum_example():
    x = t64(np.arange(1, 10).reshape(1, 1, 3, 3))
    out = T.conv2d(x, t64(np.ones((1, 1, 2, 2))))
    assert out.data[0, 0].tolist() == [[12, 16], [24, 28]]


def test_conv_shape_arithmetic():
    x = Tensor(np.zeros((1, 2, 128, 256), dtype=np.float32))
    w = Tensor(np.zeros((3, 2, 4, 4), dtype=np.float32))
    assert T.conv2d(x, w, stride=2, padding=1).shape == (1, 3, 64, 128)


@pytest.mark.parametrize("k,s,p", [(1, 1, 0), (3, 1, 1), (4, 2, 1), (2, 2, 0), (3, 2, 1), (7, 1, 3)])
def test_conv_matches_direct_loops(rng, k, s, p):
    x = rng.standard_normal((2, 3, 9, 10))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = T.conv2d(t64(x), t64(w), t64(b), stride=s, padding=p)
    assert np.allclose(out.data, conv_reference(x, w, b, s, p), atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        T.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 3, 3))))


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31))
def test_conv_linearity(alpha, beta, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, 2, 6, 6)), r.standard_normal((2, 2, 6, 6))
    w = t64(r.standard_normal((3, 2, 3, 3)))
    lhs = T.conv2d(t64(alpha * x + beta * y), w, padding=1).data
    rhs = alpha * T.conv2d(t64(x), w, padding=1).data + beta * T.conv2d(t64(y), w, padding=1).data
    assert np.allclose(lhs, rhs, rtol=1e-5, atol=1e-9)


# ---------------------------------------------------------------- conv_transpose2d

def test_convT_shape():
    x = Tensor(np.zeros((1, 2, 64, 32), dtype=np.float32))
    w = Tensor(np.zeros((2, 3, 4, 4), dtype=np.float32))
    assert T.conv_transpose2d(x, w, stride=2, padding=1).shape == (1, 3, 128, 64)


def test_convT_checkerboard_guard():
    with pytest.raises(CheckerboardRisk):
        T.conv_transpose2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((2, 2, 3, 3))), stride=2)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([(2, 2), (4, 2), (3, 1), (6, 3), (4, 4)]), st.integers(2, 6), st.integers(2, 6),
       st.integers(0, 2 ** 31))
def test_convT_is_adjoint_of_conv(ks, h, w, seed):
    k, s = ks
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 3, (h - 1) * s + k, (w - 1) * s + k))
    wt = r.standard_normal((4, 3, k, k))
    y = r.standard_normal((2, 4, h, w))
    lhs = np.vdot(T.conv2d(t64(x), t64(wt), stride=s).data, y)
    rhs = np.vdot(x, T.conv_transpose2d(t64(y), t64(wt), stride=s).data)
    assert lhs == pytest.approx(rhs, rel=1e-10)


# ---------------------------------------------------------------- batch norm

def test_bn_constant_input_train():
    x = t64(np.full((2, 3, 4, 4), 7.5))
    out = T.batch_norm(x, t64(np.ones(3)), t64(np.zeros(3)), np.zeros(3), np.ones(3), True)
    assert np.allclose(out.data, 0, atol=1e-6)


def test_bn_train_statistics(rng):
    x = t64(rng.standard_normal((4, 3, 8, 8)) * 3 + 2)
    out = T.batch_norm(x, t64(np.ones(3)), t64(np.zeros(3)), np.zeros(3), np.ones(3), True).data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-5)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-3)


def test_bn_eval_formula():
    out = T.batch_norm(t64(np.full((1, 1, 2, 2), 4.0)), t64([1.0]), t64([0.0]), np.array([2.0]),
                       np.array([4.0]), False, eps=0.0)
    assert np.all(out.data == 1.0)


def test_bn_updates_running_stats(rng):
    x = rng.standard_normal((4, 2, 5, 5)) + np.array([1.0, -2.0])[None, :, None, None]
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm(t64(x), t64(np.ones(2)), t64(np.zeros(2)), rm, rv, True, momentum=0.1)
    assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    n = x.size // 2
    assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))


def test_bn_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.batch_norm(t64(np.zeros((1, 3, 2, 2))), t64(np.ones(2)), t64(np.zeros(2)), np.zeros(2), np.ones(2),
                     True)


# ---------------------------------------------------------------- activations

def test_activation_examples():
    assert T.relu(t64(-3.0)).data == 0
    assert T.leaky_relu(t64(-1.0)).data == pytest.approx(-0.2)
    assert T.sigmoid(t64(0.0)).data == 0.5


# ---------------------------------------------------------------- resampling

def test_max_pool_window():
    assert T.max_pool2x2(t64([[[[1, 2], [3, 4]]]])).data.item() == 4


def test_max_pool_odd_dims():
    with pytest.raises(ShapeMismatch):
        T.max_pool2x2(t64(np.zeros((1, 1, 3, 4))))


def test_bilinear_constant():
    out = T.upsample2x(t64(np.full((1, 2, 3, 5), 5.0)))
    assert out.shape == (1, 2, 6, 10) and np.all(out.data == 5.0)


def test_bilinear_weights():
    out = T.upsample2x(t64([[[[0, 1], [0, 1]]]])).data[0, 0]
    assert np.allclose(out, np.tile([0, 0.25, 0.75, 1], (4, 1)))


# ---------------------------------------------------------------- reductions, combination, dense

def test_reduce_examples():
    x = t64([[[[1, 3], [5, 7]]]])
    assert T.reduce(x, "gap_spatial").data.item() == 4.0
    assert T.reduce(x, "gmp_spatial").data.item() == 7.0
    two = t64(np.concatenate([np.full((1, 1, 3, 4), 2.0), np.full((1, 1, 3, 4), 6.0)], axis=1))
    avg = T.reduce(two, "avg_over_channels")
    assert avg.shape == (1, 1, 3, 4) and np.all(avg.data == 4.0)
    assert T.reduce(two, "gap_spatial").shape == (1, 2, 1, 1)


def test_combine_examples():
    a, b = t64(np.zeros((1, 3, 2, 2))), t64(np.zeros((1, 5, 2, 2)))
    assert T.combine(a, b, "concat_channels").shape == (1, 8, 2, 2)
    x = t64(np.arange(8.0).reshape(1, 2, 2, 2))
    assert np.array_equal(T.combine(x, t64(np.ones((1, 2, 1, 1))), "elementwise_mul_broadcast").data, x.data)
    gated = T.combine(t64(np.ones((1, 2, 3, 3))), t64(np.array([0.5, 2.0]).reshape(1, 2, 1, 1)),
                      "elementwise_mul_broadcast").data
    assert np.all(gated[0, 0] == 0.5) and np.all(gated[0, 1] == 2.0)
    with pytest.raises(ShapeMismatch):
        T.combine(a, b, "add")


def test_dense_examples(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(T.dense(t64(x), t64(np.eye(4)), t64(np.zeros(4))).data, x)
    assert T.dense(t64([[2.0, 3.0]]), t64([[1.0, 1.0]]), t64([1.0])).data.item() == 6.0
    assert np.all(T.dense(t64(x), t64(np.zeros((2, 4))), t64([1.5, -1.0])).data == [1.5, -1.0])
    with pytest.raises(ShapeMismatch):
        T.dense(t64(x), t64(np.zeros((2, 5))))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-1e3, 1e3)),
       st.sampled_from(["channel", "spatial"]), st.integers(0, 2 ** 31))
def test_gate_never_increases_magnitude(f, kind, seed):
    r = np.random.default_rng(seed)
    shape = (2, 3, 1, 1) if kind == "channel" else (2, 1, 4, 4)
    gate = T.sigmoid(t64(r.standard_normal(shape) * 5))
    out = T.combine(t64(f), gate, "elementwise_mul_broadcast").data
    assert np.all(np.abs(out) <= np.abs(f))


# ---------------------------------------------------------------- dropout

def test_dropout_eval_and_rate_zero(rng):
    x = t64(rng.standard_normal((2, 3, 4, 4)))
    assert np.array_equal(T.dropout(x, 0.5, False, 1).data, x.data)
    assert np.array_equal(T.dropout(x, 0.0, True, 1).data, x.data)


def test_dropout_survivor_fraction():
    out = T.dropout(t64(np.ones((4, 8, 64, 64))), 0.5, True, 123).data
    frac = np.count_nonzero(out) / out.size
    assert 0.48 <= frac <= 0.52
    assert np.all((out == 0) | (out == 2.0))


def test_dropout_seeded():
    x = t64(np.ones((2, 2, 8, 8)))
    assert np.array_equal(T.dropout(x, 0.3, True, 7).data, T.dropout(x, 0.3, True, 7).data)
