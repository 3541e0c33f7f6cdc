import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gazelab import autodiff as ad
from gazelab.autodiff import ACOS_CLAMP, Tensor, finite_diff_check
from gazelab.errors import ContractError, DimensionError, NumericError

from gradcases import PRIMITIVES
from oracles import central_diff

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_matmul_hand_value():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert out.shape == (1, 1)
    assert out.data[0, 0] == 11.0


def test_relu_values():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0], requires_grad=True)
    ad.tsum(ad.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_acos_clamps_out_of_domain_input():
    v = ad.acos(Tensor([1.2])).data[0]
    assert np.isfinite(v)
    assert v == pytest.approx(np.arccos(1.0 - ACOS_CLAMP))
    assert v < 1e-3


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.tsum(ad.square(x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_mean():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x.mean().backward()
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_backward_accumulates_without_reset():
    x = Tensor([1.0, -2.0], requires_grad=True)
    ad.tsum(x * 3.0).backward()
    ad.tsum(x * 3.0).backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_unreachable_leaf_keeps_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([5.0], requires_grad=True)
    ad.tsum(x * x).backward()
    np.testing.assert_array_equal(y.grad, [0.0])


def test_shared_subexpression_gradient():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    ad.tsum(y + y * x).backward()  # 2x + 3x^2
    assert x.grad[0] == pytest.approx(2 * 3 + 3 * 9)


@pytest.mark.parametrize("op, args", [
    ("add", (np.zeros((2, 3)), np.zeros((3, 2)))),
    ("mul", (np.zeros((4,)), np.zeros((3,)))),
    ("matmul", (np.zeros((2, 3)), np.zeros((2, 3)))),
    ("dot", (np.zeros((2, 3)), np.zeros((2, 4)))),
    ("conv2d", (np.zeros((1, 2, 5, 5)), np.zeros((3, 1, 3, 3)))),
])
def test_shape_mismatch_names_op_and_shapes(op, args):
    with pytest.raises(DimensionError) as exc:
        getattr(ad, op)(*(Tensor(a) for a in args))
    msg = str(exc.value)
    assert op in msg
    assert str(args[0].shape) in msg and str(args[1].shape) in msg


def test_avg_pool_requires_divisible_size():
    with pytest.raises(DimensionError):
        ad.avg_pool2d(Tensor(np.zeros((1, 1, 5, 5))), 2)


def test_conv2d_matches_direct_loops(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    ref = np.zeros((2, 4, 4, 4))
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(4):
                    ref[n, o, i, j] = np.sum(x[n, :, i:i + 3, j:j + 2] * w[o]) + b[o]
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_finite_diff_quadratic():
    assert finite_diff_check(lambda x: ad.tsum(x * x), Tensor([3.0]), 1e-5) < 1e-8


def test_finite_diff_constant_function():
    err = finite_diff_check(lambda x: ad.tsum(x * 0.0) + 7.0, Tensor([1.0, 2.0]))
    assert err < 1e-4


@pytest.mark.filterwarnings("ignore:invalid value")
def test_finite_diff_rejects_non_finite():
    with pytest.raises(NumericError):
        finite_diff_check(lambda x: ad.tsum(ad.sqrt(x)), Tensor([-1.0]))


def test_finite_diff_agrees_with_numpy_oracle(rng):
    w1, w2 = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
    x0 = rng.normal(size=(2, 4))

    def f_np(x):
        return float(np.sum(np.maximum(x @ w1, 0.0) @ w2) ** 2)

    def f_ad(x):
        return ad.square(ad.tsum(ad.matmul(ad.relu(ad.matmul(x, Tensor(w1))), Tensor(w2))))

    leaf = Tensor(x0, requires_grad=True)
    f_ad(leaf).backward()
    np.testing.assert_allclose(leaf.grad, central_diff(f_np, x0), rtol=1e-6, atol=1e-6)
    assert finite_diff_check(f_ad, x0) < 1e-4


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    worst = max(finite_diff_check(*PRIMITIVES[name](rng)) for _ in range(100))
    assert worst < 1e-4


def test_replay_is_bitwise_identical(rng):
    x0 = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))

    def run():
        x = Tensor(x0, requires_grad=True)
        out = ad.tsum(ad.tanh(ad.avg_pool2d(ad.conv2d(x, Tensor(w)), 2)))
        out.backward()
        return out.data.copy(), x.grad.copy()

    (a, ga), (b, gb) = run(), run()
    assert a.tobytes() == b.tobytes() and ga.tobytes() == gb.tobytes()


def test_topological_order_puts_inputs_first():
    x = Tensor([1.0], requires_grad=True)
    y = ad.square(x)
    z = y * x + y
    order = ad.topological_order(z)
    pos = {id(n): k for k, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]


@given(arrays(np.float64, st.integers(1, 6), elements=finite),
       st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(x0, a, b):
    def grad_of(fn):
        x = Tensor(x0, requires_grad=True)
        fn(x).backward()
        return x.grad

    f = lambda x: ad.tsum(ad.tanh(x * 0.01))
    g = lambda x: ad.tsum(ad.square(x) * 0.5)
    combo = grad_of(lambda x: f(x) * a + g(x) * b)
    np.testing.assert_allclose(combo, a * grad_of(f) + b * grad_of(g), rtol=1e-10, atol=1e-10)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e6, 1e6)))
def test_acos_never_nan(x):
    t = Tensor(x, requires_grad=True)
    out = ad.acos(t)
    ad.tsum(out).backward()
    assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(t.grad))
    assert np.all(out.data >= 0) and np.all(out.data <= np.pi)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_grad_shape_matches_data(x):
    t = Tensor(x, requires_grad=True)
    ad.tsum(ad.square(t) + t).backward()
    assert t.grad.shape == t.data.shape
    assert t.data.size == int(np.prod(t.shape))
