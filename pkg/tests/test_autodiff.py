import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from canopysr import autodiff as ad
from canopysr.autodiff import AdamW, OptimizerState, Tensor, adamw_step, gradcheck
from canopysr.errors import DimensionError, NumericalError, UsageError
from canopysr.nn import MLP, Linear


def leaf(arr):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- forward values ---------------------------------------------------------------

def test_matmul_identity_and_value():
    b = Tensor([[3.0, 1.0], [0.0, 2.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), b).data, b.data)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_values():
    x = Tensor([1.5, -2.0])
    np.testing.assert_array_equal(ad.add(x, 0).data, x.data)
    np.testing.assert_array_equal(ad.scale(x, 1).data, x.data)
    assert ad.mul(Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data.tolist() == [8.0, 15.0]
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(DimensionError):
        ad.mul(Tensor(np.ones((2, 1))), Tensor(np.ones((2, 2))))


def test_gelu_fixed_point_and_asymptote():
    assert ad.gelu(Tensor([0.0])).data[0] == 0.0
    assert ad.gelu(Tensor([20.0])).data[0] == pytest.approx(20.0)


def test_layernorm_examples(rng):
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    out = ad.layernorm(Tensor(np.full((1, 4), 7.0)), one, zero, 1e-5)
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))
    out = ad.layernorm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)
    x = Tensor(rng.normal(3.0, 5.0, size=(50, 16)))
    out = ad.layernorm(x, Tensor(rng.normal(size=16)), Tensor(np.zeros(16)), 1e-5)
    # gamma scales each column; pre-affine rows are centred, so re-derive.
    pre = ad.layernorm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-5).data
    assert np.abs(pre.mean(axis=1)).max() < 1e-6
    assert out.shape == x.shape


def test_softmax_examples(rng):
    np.testing.assert_allclose(ad.softmax(Tensor(np.full((1, 5), 2.5))).data, 0.2)
    np.testing.assert_allclose(ad.softmax(Tensor([[0.0, np.log(3.0)]])).data, [[0.25, 0.75]])
    x = rng.normal(size=(6, 9))
    np.testing.assert_allclose(ad.softmax(Tensor(x + 11.0)).data, ad.softmax(Tensor(x)).data,
                               atol=1e-12)
    s = ad.softmax(Tensor(rng.normal(scale=30.0, size=(20, 7)))).data
    assert np.all(s >= 0) and np.abs(s.sum(axis=1) - 1).max() < 1e-6


def test_layout_round_trips(rng):
    a = Tensor(rng.normal(size=(2, 3, 4, 4)))
    b = Tensor(rng.normal(size=(2, 5, 4, 4)))
    c = ad.concat([a, b], axis=1)
    np.testing.assert_array_equal(c[:, 0:3].data, a.data)
    p = ad.permute(a, (2, 0, 3, 1))
    inv = tuple(np.argsort((2, 0, 3, 1)))
    np.testing.assert_array_equal(ad.permute(p, inv).data, a.data)
    with pytest.raises(DimensionError):
        ad.permute(a, (0, 1, 2))
    with pytest.raises(DimensionError):
        ad.concat([a, Tensor(np.ones((2, 3, 4, 5)))], axis=1)
    with pytest.raises(DimensionError):
        a[5]
    with pytest.raises(DimensionError):
        ad.reshape(a, (7, 5))
    with pytest.raises(DimensionError):
        ad.concat([a, b], axis=4)


def test_slice_gradient_is_indicator(rng):
    x = leaf(rng.normal(size=(3, 5)))
    x[1:3, 2:4].sum().backward()
    mask = np.zeros((3, 5))
    mask[1:3, 2:4] = 1
    np.testing.assert_array_equal(x.grad, mask)
    res = gradcheck(lambda: x[1:3, 2:4].sum(), [x])
    assert res.passed


def test_mse_examples():
    x = Tensor([1.0, 2.0])
    assert ad.mse(x, x).data == 0.0
    assert ad.mse(Tensor([0.0, 0.0]), Tensor([1.0, 3.0])).data == 5.0
    with pytest.raises(DimensionError):
        ad.mse(Tensor(np.ones(2)), Tensor(np.ones(3)))


@given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)))
def test_mse_nonnegative(a, b):
    assert ad.mse(Tensor(a), Tensor(b)).data >= 0


# -- backward -----------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(UsageError):
        ad.scale(x, 2.0).backward()


def test_unreached_param_zero_grad(rng):
    used = leaf(rng.normal(size=3))
    unused = leaf(rng.normal(size=3))
    ad.mse(used, Tensor(np.zeros(3))).backward()
    np.testing.assert_array_equal(unused.grad, np.zeros(3))
    assert np.any(used.grad != 0)


def test_fan_out_accumulates():
    x = leaf([2.0])
    y = ad.mul(x, x)
    ad.add(y, x).sum().backward()
    assert x.grad[0] == pytest.approx(5.0)


def test_matmul_grad_fd(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    res = gradcheck(lambda: ad.matmul(a, b).sum(), [a, b])
    assert res.passed, res


def test_batched_matmul_grad_fd(rng):
    a, b = leaf(rng.normal(size=(2, 3, 3, 4))), leaf(rng.normal(size=(2, 3, 4, 2)))
    w = Tensor(rng.normal(size=(2, 3, 3, 2)))
    res = gradcheck(lambda: ad.mul(ad.matmul(a, b), w).sum(), [a, b])
    assert res.passed, res


@pytest.mark.parametrize("x0", [-2.0, -0.1, 0.5, 3.0])
def test_gelu_grad_fd(x0):
    x = leaf([x0])
    assert gradcheck(lambda: ad.gelu(x).sum(), [x]).passed


def _random_weights(rng, shape):
    return Tensor(rng.normal(size=shape))


OPS = {
    "add": lambda xs, w: ad.mul(ad.add(xs[0], xs[1]), w),
    "sub": lambda xs, w: ad.mul(ad.sub(xs[0], xs[1]), w),
    "mul": lambda xs, w: ad.mul(ad.mul(xs[0], xs[1]), w),
    "scale": lambda xs, w: ad.mul(ad.scale(xs[0], -1.7), w),
    "gelu": lambda xs, w: ad.mul(ad.gelu(xs[0]), w),
    "softmax": lambda xs, w: ad.mul(ad.softmax(xs[0]), w),
    "permute": lambda xs, w: ad.mul(ad.permute(ad.reshape(xs[0], (4, 3)), (1, 0)),
                                    ad.reshape(w, (3, 4))),
    "expand": lambda xs, w: ad.mul(ad.expand(xs[0][0], (3, 4)), w),
    "concat": lambda xs, w: ad.mul(ad.concat([xs[0][:, :2], xs[1][:, 2:]], axis=1), w),
    "mean": lambda xs, w: ad.mul(ad.expand(ad.mean(ad.mul(xs[0], w), axis=1, keepdims=True),
                                           (3, 4)), w),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_random_points(name, rng):
    """Every differentiable op against central differences at 10 random points."""
    for _ in range(10):
        xs = [leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))]
        w = _random_weights(rng, (3, 4))
        fn = lambda: OPS[name](xs, w).sum()  # noqa: E731
        res = gradcheck(fn, xs)
        assert res.passed, (name, res.max_rel_error)


def test_layernorm_grad_fd(rng):
    for _ in range(10):
        x, g, b = leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
        w = Tensor(rng.normal(size=(3, 5)))
        res = gradcheck(lambda: ad.mul(ad.layernorm(x, g, b, 1e-5), w).sum(), [x, g, b])
        assert res.passed, res


def test_mse_grad_fd(rng):
    for _ in range(10):
        a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 3)))
        assert gradcheck(lambda: ad.mse(a, b), [a, b]).passed


def test_two_layer_mlp_grad_fd(rng):
    net = MLP([5, 7, 3], rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(4, 5)))
    y = Tensor(rng.normal(size=(4, 3)))
    res = gradcheck(lambda: ad.mse(net(x), y), net.parameters())
    assert res.passed, res.max_rel_error


def test_grad_accumulation_matches_full_batch(rng):
    net = Linear(3, 2, rng, dtype=np.float64)
    x = rng.normal(size=(8, 3))
    y = rng.normal(size=(8, 2))
    ad.mse(net(Tensor(x)), Tensor(y)).backward()
    full = [p.grad.copy() for p in net.parameters()]
    net.zero_grad()
    for part in (slice(0, 4), slice(4, 8)):
        # each half-batch mse averages over half the items, so halve it
        ad.scale(ad.mse(net(Tensor(x[part])), Tensor(y[part])), 0.5).backward()
    for f, p in zip(full, net.parameters()):
        np.testing.assert_allclose(p.grad, f, rtol=1e-6, atol=1e-12)


def test_forward_is_deterministic(rng):
    net = MLP([6, 16, 6], rng)
    x = Tensor(rng.normal(size=(32, 6)).astype(np.float32))
    a = net(x).data
    b = net(x).data
    assert a.tobytes() == b.tobytes()


def test_no_grad_records_nothing(rng):
    x = leaf([1.0, 2.0])
    with ad.no_grad():
        y = ad.mul(x, x)
    assert y.is_leaf and not y.tracked


# -- AdamW --------------------------------------------------------------------------

def test_adamw_zero_gradient_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    out, st_ = adamw_step(p, {"w": np.zeros(2)}, OptimizerState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(out["w"], p["w"])
    assert st_.step == 1


def test_adamw_first_step_moves_by_lr():
    out, _ = adamw_step({"w": np.array([0.5])}, {"w": np.array([1.0])},
                        OptimizerState(lr=0.1, weight_decay=0.0))
    assert out["w"][0] == pytest.approx(0.4, abs=1e-6)


def test_adamw_weight_decay_shrinks():
    state = OptimizerState(lr=0.1, weight_decay=0.5)
    w = np.array([2.0, -3.0])
    for _ in range(3):
        new, state = adamw_step({"w": w}, {"w": np.zeros(2)}, state)
        assert np.all(np.abs(new["w"]) < np.abs(w))
        w = new["w"]
    assert state.step == 3


def test_adamw_rejects_non_finite():
    state = OptimizerState()
    with pytest.raises(NumericalError, match="w"):
        adamw_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, state)
    assert state.step == 0


def test_adamw_rejects_frozen(rng):
    net = Linear(2, 2, rng)
    net.freeze()
    with pytest.raises(UsageError):
        AdamW(net.named_parameters())


def test_adamw_state_defaults():
    s = OptimizerState()
    assert (s.lr, s.beta1, s.beta2, s.eps, s.weight_decay) == (1e-4, 0.9, 0.999, 1e-8, 0.01)


def test_adamw_trains_linear_regression(rng):
    net = Linear(3, 1, rng, dtype=np.float64)
    x = rng.normal(size=(64, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]]) + 0.3
    opt = AdamW(net.named_parameters(), lr=0.05, weight_decay=0.0)
    for _ in range(500):
        opt.zero_grad()
        loss = ad.mse(net(Tensor(x)), Tensor(y))
        loss.backward()
        opt.step()
    assert float(loss.data) < 1e-4
