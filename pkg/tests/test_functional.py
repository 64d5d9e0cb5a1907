import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gandisco import functional as F
from gandisco.functional import ParameterError
from gandisco.tensor import DimensionError, Tensor

from conftest import check_grads
from oracles import naive_conv2d


def test_conv_zero_input_gives_zero():
    k = np.random.default_rng(0).normal(size=(2, 1, 2, 2))
    assert np.array_equal(F.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(k)).data, np.zeros((2, 2, 2)))


def test_conv_identity_kernel():
    x = np.random.default_rng(1).normal(size=(1, 4, 5))
    out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv_matches_naive_loops_example():
    rng = np.random.default_rng(2)
    x, k = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    assert np.max(np.abs(F.conv2d(Tensor(x), Tensor(k)).data - naive_conv2d(x, k))) <= 1e-10


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv_output_size_and_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, k = rng.normal(size=(2, 7, 6)), rng.normal(size=(2, 2, 3, 2))
    out = F.conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad).data
    assert out.shape == (2, (7 + 2 * pad - 3) // stride + 1, (6 + 2 * pad - 2) // stride + 1)
    assert np.max(np.abs(out - naive_conv2d(x, k, stride, pad))) <= 1e-10


def test_conv_errors():
    with pytest.raises(DimensionError, match="axis 1"):
        F.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(DimensionError, match="axes 2,3"):
        F.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ParameterError):
        F.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


def test_transposed_conv_zero_input():
    k = np.random.default_rng(3).normal(size=(2, 3, 4, 4))
    assert not F.transposed_conv2d(Tensor(np.zeros((2, 3, 3))), Tensor(k), 2, 1).data.any()


def test_transposed_conv_single_value_spreads():
    out = F.transposed_conv2d(Tensor(np.full((1, 1, 1), 0.7)), Tensor(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 2, 2) and np.all(out.data == 0.7)


def _adjoint_gap(rng, c, o, h, kh, stride, pad):
    x = rng.normal(size=(1, c, h, h))
    k = rng.normal(size=(o, c, kh, kh))
    y_shape = F.conv2d(Tensor(x), Tensor(k), stride, pad).shape
    y = rng.normal(size=y_shape)
    t = F.transposed_conv2d(Tensor(y), Tensor(k), stride, pad).data
    if t.shape != x.shape:
        return None  # output-size formula is not exactly invertible for this combination
    return abs(np.sum(F.conv2d(Tensor(x), Tensor(k), stride, pad).data * y) - np.sum(x * t))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3), st.integers(4, 9),
       st.integers(1, 4), st.integers(1, 2), st.integers(0, 1))
def test_adjoint_identity(seed, c, o, h, kh, stride, pad):
    gap = _adjoint_gap(np.random.default_rng(seed), c, o, h, kh, stride, pad)
    if gap is not None:
        assert gap <= 1e-8


def test_transposed_conv_output_size():
    out = F.transposed_conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((3, 2, 4, 4))), 2, 1)
    assert out.shape == (1, 2, 8, 8)  # (4-1)*2 - 2 + 4


def test_relu_example():
    assert np.array_equal(F.relu(Tensor([-2.0, 0.0, 3.0])).data, [0.0, 0.0, 3.0])


def test_softmax_constant():
    assert np.allclose(F.softmax(Tensor(np.full(4, 3.3))).data, 0.25, atol=0, rtol=1e-15)


def test_global_avg_pool_example():
    assert F.global_avg_pool(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))).data[0] == 2.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6), st.floats(0.1, 5))
def test_softmax_is_a_distribution(seed, n, scale):
    x = np.random.default_rng(seed).normal(size=(3, n)) * scale
    p = F.softmax(Tensor(x), axis=-1).data
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)
    if n > 1:
        assert np.all(p > 0) and np.all(p < 1)


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_probability(p):
    with pytest.raises(ParameterError):
        F.layer_op(Tensor(np.ones(3)), "dropout", p=p, rng=np.random.default_rng(0))


def test_dropout_inverted_scaling_and_eval_identity():
    x = Tensor(np.ones(20000))
    y = F.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 2.0} and abs(y.mean() - 1.0) < 0.05
    assert F.dropout(x, 0.5, None, training=False) is x


def test_max_pool_routes_gradient_to_first_max():
    x = Tensor(np.array([[[1.0, 1.0], [0.0, 1.0]]]), requires_grad=True)
    from gandisco.tensor import backward
    backward(F.max_pool2d(x, 2).sum())
    assert np.array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_l2_norm_unit_length():
    v = F.l2_norm(Tensor(np.array([[3.0, 4.0], [0.0, 0.0]]))).data
    assert np.allclose(v[0], [0.6, 0.8]) and np.array_equal(v[1], [0.0, 0.0])


def test_unknown_layer_kind():
    with pytest.raises(ParameterError):
        F.layer_op(Tensor(np.ones(2)), "swish")


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "softmax", "max_pool", "global_avg_pool",
                                  "fully_connected", "dropout", "l2_norm"])
def test_layer_kind_gradients(kind):
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(2, 2, 4, 4)) + 0.05, requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    kw = {"weight": w} if kind == "fully_connected" else {}
    if kind == "dropout":
        kw = {"p": 0.3, "rng": None}

    def build():
        if kind == "dropout":
            kw["rng"] = np.random.default_rng(11)  # same mask at every evaluation
        out = F.layer_op(x, kind, **kw)
        proj = Tensor(np.cos(np.arange(out.size)).reshape(out.shape))
        return (out * proj).sum()

    tensors = [x, w] if kind == "fully_connected" else [x]
    assert check_grads(build, tensors) < 1e-3
