"""Unit and property tests for the reverse-mode autodiff engine."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from csplade import autodiff as ad
from csplade.autodiff import ShapeError, Tensor, grad_check


def f64(x, requires_grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=requires_grad,
                  dtype=np.float64)


class TestForwardValues:
    def test_relu(self):
        out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_log1p_zero(self):
        assert ad.log1p(Tensor([0.0])).data[0] == 0.0

    def test_max_over_axis(self):
        out = ad.max_over_axis(Tensor([[1.0, 3.0], [2.0, 0.0]]), axis=0)
        np.testing.assert_array_equal(out.data, [2.0, 3.0])

    def test_uniform_softmax_cross_entropy_is_log_v(self):
        for v in (2, 7, 50):
            logits = Tensor(np.zeros((4, v)))
            loss = ad.softmax_cross_entropy(logits, np.zeros(4, dtype=np.int64))
            assert abs(float(loss.data) - np.log(v)) < 1e-6

    def test_gelu_matches_erf_form(self):
        from scipy.special import erf
        x = np.linspace(-3, 3, 13)
        expected = 0.5 * x * (1 + erf(x / np.sqrt(2)))
        np.testing.assert_allclose(ad.gelu(f64(x)).data, expected, atol=1e-12)

    def test_reparam_relu_forward_is_bit_identical_to_relu(self):
        x = np.random.default_rng(0).normal(size=100).astype(np.float32)
        a = ad.relu(Tensor(x)).data
        b = ad.reparam_relu(Tensor(x)).data
        np.testing.assert_array_equal(a, b)

    def test_masked_fill_broadcasts(self):
        t = Tensor(np.ones((2, 3)))
        out = ad.masked_fill(t, np.array([[True], [False]]), -5.0)
        np.testing.assert_array_equal(out.data, [[-5, -5, -5], [1, 1, 1]])


class TestBackwardContract:
    def test_square_gradient(self):
        x = f64([3.0], requires_grad=True)
        ad.sum_over_axis(ad.mul(x, x)).backward()
        assert x.grad[0] == pytest.approx(6.0)

    def test_dead_relu_gradient_is_zero(self):
        x = f64([-1.0], requires_grad=True)
        ad.sum_over_axis(ad.relu(x)).backward()
        assert x.grad[0] == 0.0

    def test_non_scalar_backward_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            ad.relu(Tensor([1.0, 2.0], requires_grad=True)).backward()

    def test_double_backward_rejected(self):
        x = f64([2.0], requires_grad=True)
        loss = ad.sum_over_axis(ad.mul(x, x))
        loss.backward()
        with pytest.raises(RuntimeError, match="twice"):
            loss.backward()

    def test_unreachable_parameter_keeps_no_grad(self):
        x = f64([1.0], requires_grad=True)
        y = f64([1.0], requires_grad=True)
        ad.sum_over_axis(ad.mul(x, x)).backward()
        assert y.grad is None

    def test_grad_accumulates_across_shared_use(self):
        x = f64([2.0], requires_grad=True)
        ad.sum_over_axis(ad.add(x, x)).backward()
        assert x.grad[0] == pytest.approx(2.0)

    def test_reparam_relu_gradient_is_gelu_gradient(self):
        # d gelu/dx at -1 and 2 (exact erf form)
        # Phi(x) + x*phi(x): Phi(-1) - phi(1) and Phi(2) + 2*phi(2)
        for point, expected in ((-1.0, -0.0833154706), (2.0, 1.0852318011)):
            x = f64([point], requires_grad=True)
            ad.sum_over_axis(ad.reparam_relu(x)).backward()
            assert x.grad[0] == pytest.approx(expected, abs=1e-8)


class TestShapeErrors:
    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError, match="add"):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError, match="matmul"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_embedding_id_out_of_range(self):
        with pytest.raises(ShapeError, match="embedding"):
            ad.embedding(Tensor(np.ones((3, 2)), requires_grad=True), np.array([3]))

    def test_reshape_bad_size(self):
        with pytest.raises(ShapeError, match="reshape"):
            ad.reshape(Tensor(np.ones(6)), (4, 2))


def _away_from_kinks(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    x[np.abs(x) < margin] += 2 * margin
    return x

OPS = {
    "add": lambda x: ad.sum_over_axis(ad.add(x, Tensor(np.full(x.shape, 0.3, dtype=np.float64)))),
    "sub": lambda x: ad.sum_over_axis(ad.sub(x, Tensor(np.full(x.shape, 0.2, dtype=np.float64)))),
    "mul": lambda x: ad.sum_over_axis(ad.mul(x, x)),
    "scale": lambda x: ad.sum_over_axis(ad.scale(x, 1.7)),
    "matmul": lambda x: ad.sum_over_axis(ad.matmul(x, ad.transpose(x))),
    "relu": lambda x: ad.sum_over_axis(ad.relu(x)),
    "gelu": lambda x: ad.sum_over_axis(ad.gelu(x)),
    "log1p": lambda x: ad.sum_over_axis(ad.log1p(ad.mul(x, x))),
    "exp": lambda x: ad.sum_over_axis(ad.exp(ad.scale(x, 0.3))),
    "transpose": lambda x: ad.sum_over_axis(ad.mul(ad.transpose(x), ad.transpose(x))),
    "reshape": lambda x: ad.sum_over_axis(ad.mul(ad.reshape(x, (-1,)), ad.reshape(x, (-1,)))),
    "max_over_axis": lambda x: ad.sum_over_axis(ad.max_over_axis(x, axis=1)),
    "sum_over_axis": lambda x: ad.sum_over_axis(ad.mul(ad.sum_over_axis(x, axis=0), ad.sum_over_axis(x, axis=0))),
    "mean_over_axis": lambda x: ad.sum_over_axis(ad.mul(ad.mean_over_axis(x, axis=1), ad.mean_over_axis(x, axis=1))),
    "masked_fill": lambda x: ad.sum_over_axis(ad.mul(m := ad.masked_fill(x, np.eye(x.shape[0], x.shape[1], dtype=bool), 0.5), m)),
    "softmax": lambda x: ad.sum_over_axis(ad.mul(s := ad.softmax(x, axis=-1), s)),
    "softmax_cross_entropy": lambda x: ad.softmax_cross_entropy(x, np.arange(x.shape[0]) % x.shape[1]),
    "layer_norm": lambda x: ad.sum_over_axis(
        ad.mul(n := ad.layer_norm(x, Tensor(np.full(x.shape[-1], 1.1, dtype=np.float64)),
                                  Tensor(np.full(x.shape[-1], 0.1, dtype=np.float64))), n)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = _away_from_kinks(rng, (3, 4))
        assert grad_check(OPS[name], Tensor(x, dtype=np.float64)) < 1e-6, name


def test_embedding_gradient():
    ids = np.array([[0, 2], [2, 1]])

    def f(w):
        return ad.sum_over_axis(ad.mul(e := ad.embedding(w, ids), e))

    rng = np.random.default_rng(0)
    assert grad_check(f, Tensor(rng.normal(size=(4, 3)), dtype=np.float64)) < 1e-6


def test_layer_norm_gain_bias_gradients():
    rng = np.random.default_rng(1)
    a = np.asarray(rng.normal(size=(3, 5)))

    def f_gain(g):
        return ad.sum_over_axis(ad.layer_norm(Tensor(a, dtype=np.float64), g,
                                              Tensor(np.zeros(5), dtype=np.float64)))

    def f_bias(b):
        return ad.sum_over_axis(ad.layer_norm(Tensor(a, dtype=np.float64),
                                              Tensor(np.ones(5), dtype=np.float64), b))

    assert grad_check(f_gain, Tensor(rng.normal(size=5), dtype=np.float64)) < 1e-6
    assert grad_check(f_bias, Tensor(rng.normal(size=5), dtype=np.float64)) < 1e-6


def test_grad_check_trivial_cases():
    # sum of squares
    err = grad_check(lambda x: ad.sum_over_axis(ad.mul(x, x)),
                     Tensor([1.0, 2.0, 3.0], dtype=np.float64))
    assert err < 1e-8
    # everywhere-dead relu: both gradients identically zero
    err = grad_check(lambda x: ad.sum_over_axis(ad.relu(x)),
                     Tensor([-1.0, -2.0], dtype=np.float64))
    assert err == 0.0


def test_grad_check_rejects_non_finite():
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        grad_check(lambda x: ad.sum_over_axis(ad.exp(ad.scale(x, 1000.0))),
                   Tensor([500.0], dtype=np.float64))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=2, max_side=5),
                  elements=st.floats(-10, 10)))
def test_softmax_rows_sum_to_one(x):
    p = ad.softmax(Tensor(x, dtype=np.float64), axis=-1).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert (p >= 0).all()


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (4, 3), elements=st.floats(-100, 100)))
def test_relu_output_non_negative(x):
    assert (ad.relu(Tensor(x, dtype=np.float64)).data >= 0).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-50, 50))
def test_cross_entropy_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(3, 6))
    t = np.array([0, 3, 5])
    a = float(ad.softmax_cross_entropy(Tensor(logits, dtype=np.float64), t).data)
    b = float(ad.softmax_cross_entropy(Tensor(logits + shift, dtype=np.float64), t).data)
    assert abs(a - b) < 1e-9
