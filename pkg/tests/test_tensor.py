import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from athresh import tensor as T
from athresh.tensor import ContractError, DegenerateInputError, DomainError, ShapeError, Tensor

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_add_example():
    out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert out.data.tolist() == [4.0, 6.0]


def test_sigmoid_zero_is_half():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_sigmoid_large_inputs_are_finite():
    out = T.sigmoid(Tensor([-1000.0, 1000.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == 0.0 and out.data[1] == 1.0


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_log_domain():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))


def test_div_by_zero():
    with pytest.raises(DomainError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_matmul_identity():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(T.matmul(Tensor(a), Tensor(np.eye(3))).data, a)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_uniform_row():
    out = T.softmax(Tensor(np.zeros((1, 4))), axis=-1)
    assert np.allclose(out.data, 0.25)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax(Tensor(x), axis=-1).data
    assert np.allclose(s.sum(axis=-1), 1.0)
    assert np.all(s >= 0)


def test_layernorm_constant_row_is_zero():
    out = T.layernorm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.allclose(out.data, 0.0)


def test_layernorm_single_element_axis():
    with pytest.raises(DegenerateInputError):
        T.layernorm(Tensor(np.ones((3, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 1, 5, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    assert np.array_equal(T.conv2d(Tensor(x), Tensor(k), padding=1).data, x)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_stride_shape():
    out = T.conv2d(Tensor(np.zeros((2, 1, 8, 8))), Tensor(np.zeros((4, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (2, 4, 4, 4)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 5, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(k), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 6))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                ref[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * k[o])
    assert np.allclose(got, ref)


def test_resize_constant_map():
    out = T.resize_bilinear(Tensor(np.full((1, 1, 4, 4), 2.5)), (16, 16))
    assert np.allclose(out.data, 2.5)


def test_resize_align_corners_false_samples():
    # 2 -> 4 upsample: output pixel centres sit at source coords -0.25, 0.25, 0.75, 1.25
    out = T.resize_bilinear(Tensor(np.array([[[[0.0, 1.0]]]])), (1, 4)).data.ravel()
    assert np.allclose(out, [0.0, 0.25, 0.75, 1.0])


def test_take_scatter_gradient():
    x = leaf(np.arange(12.0).reshape(3, 4))
    x[1:3, 0:2].sum().backward()
    expected = np.zeros((3, 4))
    expected[1:3, 0:2] = 1.0
    assert np.array_equal(x.grad, expected)


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        T.backward(leaf([1.0, 2.0]) * 2.0)


def test_backward_needs_grad_path():
    with pytest.raises(ContractError):
        T.backward(Tensor(1.0))


def test_grad_accumulates_for_reused_input():
    x = leaf(3.0)
    (x * x + x).backward()
    assert x.grad == pytest.approx(7.0)


def test_tape_is_topological():
    x = leaf(np.ones(3))
    y = T.exp(x) * x
    z = (y + x).sum()
    order = T.tape(z)
    seen = set()
    for node in order:
        for parent in node._parents:
            if parent._parents:
                assert id(parent) in seen
        seen.add(id(node))
    assert len(order) == len({id(n) for n in order})


def test_no_grad_builds_no_graph():
    x = leaf(1.0)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_zero_grad():
    x = leaf([1.0, 2.0])
    (x * 2.0).sum().backward()
    x.zero_grad()
    assert np.array_equal(x.grad, np.zeros(2))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_mul_gradient_property(a, b):
    x, y = leaf(a), leaf(b)
    (x * y).sum().backward()
    assert np.allclose(x.grad, b) and np.allclose(y.grad, a)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_sigmoid_gradcheck_property(a):
    x = leaf(a)
    assert T.gradcheck(lambda: (T.sigmoid(x) * x).sum(), [x]) < 1e-4


def test_relu_kink_coordinates_are_skipped():
    x = leaf([0.0005, 1.0])
    num = T.numerical_grad(lambda: T.relu(x).sum(), x, step=1e-3)
    assert np.isnan(num[0]) and num[1] == pytest.approx(1.0)


def test_all_values_finite_after_ops():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 4)) * 30)
    out = T.layernorm(T.softmax(x, axis=-1), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.all(np.isfinite(out.data))
