import numpy as np
import pytest

from parcaps import autodiff as ad
from parcaps.autodiff import Tensor


def rand(rng, *shape):
    return rng.standard_normal(shape)


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rand(rng, 3, 3)
    out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_softmax_uniform_on_zeros():
    out = ad.softmax(Tensor(np.zeros(4)), axis=0)
    np.testing.assert_array_equal(out.data, np.full(4, 0.25))


def test_conv2d_against_naive_loop():
    rng = np.random.default_rng(1)
    x = rand(rng, 1, 1, 5, 5)
    w = rand(rng, 1, 1, 3, 3)
    out = ad.conv2d(Tensor(x), Tensor(w)).data
    expect = np.zeros((1, 1, 3, 3))
    for i in range(3):
        for j in range(3):
            expect[0, 0, i, j] = np.sum(x[0, 0, i:i + 3, j:j + 3] * w[0, 0])
    np.testing.assert_allclose(out, expect, rtol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (1, 1), (2, 1), (3, 2)])
def test_conv2d_shapes_and_values(stride, padding):
    rng = np.random.default_rng(2)
    x = rand(rng, 2, 3, 9, 8)
    w = rand(rng, 4, 3, 3, 3)
    out = ad.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (9 + 2 * padding - 3) // stride + 1
    ow = (8 + 2 * padding - 3) // stride + 1
    assert out.shape == (2, 4, oh, ow)
    expect = np.zeros_like(out)
    for b in range(2):
        for o in range(4):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                    expect[b, o, i, j] = np.sum(patch * w[o])
    np.testing.assert_allclose(out, expect, rtol=1e-10, atol=1e-12)


def test_grouped_conv2d_matches_per_group_conv():
    rng = np.random.default_rng(3)
    x = rand(rng, 2, 6, 7, 7)
    w = rand(rng, 4, 3, 3, 3)
    out = ad.conv2d(Tensor(x), Tensor(w), groups=2).data
    lo = ad.conv2d(Tensor(x[:, :3]), Tensor(w[:2])).data
    hi = ad.conv2d(Tensor(x[:, 3:]), Tensor(w[2:])).data
    np.testing.assert_allclose(out, np.concatenate([lo, hi], axis=1), rtol=1e-12)


def test_backward_identity_and_sum():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = ad.reshape(x, (3,))
    y.backward(np.ones(3))
    np.testing.assert_array_equal(x.grad, np.ones(3))

    x = Tensor(np.arange(5.0), requires_grad=True)
    ad.reduce_sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(5))


def test_fanout_accumulates_by_summation():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.add(ad.multiply(x, 3.0), ad.multiply(x, 4.0))
    y.backward(np.ones(1))
    np.testing.assert_allclose(x.grad, [7.0])


def test_linear_graph_gradcheck_is_tiny():
    err = ad.grad_check(lambda x: ad.multiply(x, 3.0), [np.array([0.3, -1.2, 0.7])])
    assert err < 1e-10


def test_relu_gradcheck_away_from_kink():
    rng = np.random.default_rng(4)
    x = rng.uniform(0.1, 1.0, size=11)
    err = ad.grad_check(ad.relu, [x], epsilon=1e-5)
    assert err < 1e-4


def test_gradcheck_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        ad.grad_check(ad.relu, [np.ones(3)], epsilon=0.0)


PRIMITIVE_CASES = []


def _case(name, fn, make_inputs):
    PRIMITIVE_CASES.append(pytest.param(fn, make_inputs, id=name))


_case("add", ad.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))])
_case("add_broadcast", ad.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal((1, 4))])
_case("subtract", ad.subtract, lambda r: [r.standard_normal((2, 5)), r.standard_normal((2, 5))])
_case("multiply", ad.multiply, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))])
_case("divide", ad.divide,
      lambda r: [r.standard_normal((3, 3)), r.uniform(0.5, 2.0, (3, 3)) * r.choice([-1, 1], (3, 3))])
_case("negate", ad.negate, lambda r: [r.standard_normal((4,))])
_case("maximum", ad.maximum,
      lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4)) + 0.3])
_case("relu", ad.relu, lambda r: [r.uniform(0.2, 1.5, (3, 4)) * r.choice([-1, 1], (3, 4))])
_case("logistic", ad.logistic, lambda r: [r.standard_normal((3, 4))])
_case("softplus", ad.softplus, lambda r: [r.standard_normal((3, 4))])
_case("square", ad.square, lambda r: [r.standard_normal((5,))])
_case("sqrt", ad.sqrt, lambda r: [r.uniform(0.2, 3.0, (4, 2))])
_case("log", ad.log, lambda r: [r.uniform(0.2, 3.0, (4, 2))])
_case("exp", ad.exp, lambda r: [r.standard_normal((4, 2))])
_SOFTMAX_W = np.random.default_rng(5).standard_normal((3, 5))
_case("softmax", lambda x: ad.multiply(ad.softmax(x, axis=1), Tensor(_SOFTMAX_W)),
      lambda r: [r.standard_normal((3, 5))])
_case("sum_axes", lambda x: ad.reduce_sum(x, axis=(0, 2)), lambda r: [r.standard_normal((2, 3, 4))])
_case("mean_keepdims", lambda x: ad.reduce_mean(x, axis=1, keepdims=True),
      lambda r: [r.standard_normal((3, 4))])
_case("l2_norm", lambda x: ad.l2_norm(x, axis=-1), lambda r: [r.standard_normal((3, 6)) + 0.1])
_case("matmul", ad.matmul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))])
_case("batched_matmul", ad.batched_matmul,
      lambda r: [r.standard_normal((2, 3, 4, 5)), r.standard_normal((3, 5, 2))])
_case("conv2d", lambda x, w: ad.conv2d(x, w, stride=2, padding=1),
      lambda r: [r.standard_normal((2, 3, 6, 6)), r.standard_normal((4, 3, 3, 3))])
_case("grouped_conv2d", lambda x, w: ad.conv2d(x, w, stride=1, padding=1, groups=2),
      lambda r: [r.standard_normal((2, 4, 5, 5)), r.standard_normal((6, 2, 3, 3))])
_case("concatenate", lambda a, b: ad.concatenate([a, b], axis=1),
      lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 4))])
_case("reshape", lambda x: ad.reshape(x, (6, 2)), lambda r: [r.standard_normal((3, 4))])
_case("transpose", lambda x: ad.transpose(x, (2, 0, 1)), lambda r: [r.standard_normal((2, 3, 4))])
_case("slice", lambda x: x[:, 1:5:2], lambda r: [r.standard_normal((3, 6))])
_case("broadcast", lambda x: ad.broadcast_to(x, (4, 3, 5)), lambda r: [r.standard_normal((3, 1))])


@pytest.mark.parametrize("fn,make_inputs", PRIMITIVE_CASES)
def test_primitive_gradients(fn, make_inputs):
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(5):
        worst = max(worst, ad.grad_check(fn, make_inputs(rng), epsilon=1e-6))
    assert worst < 1e-4


def test_forward_is_pure_bit_identical():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        out = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1)
        return ad.softmax(ad.reduce_sum(out, axis=(2, 3)), axis=1).data

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()


def test_concat_slice_routes_gradients_exactly():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor(np.arange(8.0).reshape(2, 4), requires_grad=True)
    cat = ad.concatenate([a, b], axis=1)
    left = cat[:, :3]
    right = cat[:, 3:]
    ad.reduce_sum(ad.multiply(left, 2.0)).backward()
    np.testing.assert_array_equal(a.grad, np.full((2, 3), 2.0))
    np.testing.assert_array_equal(b.grad, np.zeros((2, 4)))
    ad.reduce_sum(ad.multiply(right, 5.0)).backward()
    np.testing.assert_array_equal(b.grad, np.full((2, 4), 5.0))
    np.testing.assert_array_equal(a.grad, np.full((2, 3), 2.0))


def test_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((4, 3, 3, 3))))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((4, 3, 3, 3))), groups=2)


def test_nonfinite_forward_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log(Tensor(np.array([0.0])))
    with pytest.raises(ad.NonFiniteError):
        ad.divide(Tensor(np.array([1.0])), Tensor(np.array([0.0])))
    prior = ad.set_finite_checks(False)
    try:
        out = ad.divide(Tensor(np.array([1.0])), Tensor(np.array([0.0])))
        assert np.isinf(out.data[0])
    finally:
        ad.set_finite_checks(prior)


def test_scalar_operand_keeps_float32():
    x = Tensor(np.zeros(3, dtype=np.float32))
    assert (x + 0.5).dtype == np.float32
    assert (0.5 * x).dtype == np.float32
    assert (x / 2).dtype == np.float32


def test_backward_requires_matching_seed():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    y = ad.multiply(x, 2.0)
    with pytest.raises(ad.ShapeError):
        y.backward(np.ones(3))
    with pytest.raises(ad.ShapeError):
        y.backward()  # non-scalar without seed
