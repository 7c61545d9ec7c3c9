import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowppf import tensor_ad as ad
from flowppf.errors import NumericError, ShapeError, StateError


def leaf(v):
    return ad.Tensor(np.asarray(v, dtype=float), requires_grad=True)


def test_forward_product():
    a, b = leaf(2.0), leaf(3.0)
    assert ad.forward(a * b) == 6.0


def test_exp_zero():
    assert ad.exp(ad.as_tensor(0.0)).value == 1.0


def test_mlp_matches_straight_line_arithmetic(rng):
    x = rng.standard_normal((7, 5))
    ws = [rng.standard_normal((5, 6)), rng.standard_normal((6, 4)), rng.standard_normal((4, 2))]
    bs = [rng.standard_normal(6), rng.standard_normal(4), rng.standard_normal(2)]
    h = ad.as_tensor(x)
    for k, (w, b) in enumerate(zip(ws, bs)):
        h = ad.matmul(h, leaf(w)) + leaf(b)
        if k < 2:
            h = ad.tanh(h)
    ref = x
    for k, (w, b) in enumerate(zip(ws, bs)):
        z = np.zeros((ref.shape[0], w.shape[1]))
        for i in range(ref.shape[0]):
            for j in range(w.shape[1]):
                z[i, j] = sum(ref[i, m] * w[m, j] for m in range(w.shape[0])) + b[j]
        ref = np.tanh(z) if k < 2 else z
    assert np.max(np.abs(h.value - ref)) < 1e-12


def test_backward_product():
    a, b = leaf(2.0), leaf(3.0)
    ad.backward(a * b)
    assert a.grad == 3.0 and b.grad == 2.0


def test_tanh_derivative_at_zero():
    x = leaf(0.0)
    ad.backward(ad.tanh(x))
    assert x.grad == 1.0


def test_backward_twice_is_state_error():
    a = leaf(2.0)
    y = a * a
    ad.backward(y)
    with pytest.raises(StateError):
        ad.backward(y)


def test_backward_on_stale_graph_is_state_error():
    a = leaf(2.0)
    y = ad.exp(a)
    a.assign(3.0)
    with pytest.raises(StateError):
        ad.backward(y)
    ad.forward(y)
    ad.backward(y)
    assert np.isclose(a.grad, np.exp(3.0))


def test_forward_reevaluates_after_assign():
    a = leaf(1.0)
    y = a * a + 1.0
    a.assign(4.0)
    assert ad.forward(y) == 17.0


def test_shape_error_names_node():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


def test_grad_check_square():
    assert ad.grad_check(lambda x: ad.sum_(x * x), np.array([1.0])) < 1e-8


def test_grad_check_sum_sin(rng):
    # sin(x) = Im exp(ix) is not a primitive; tanh-based smooth surrogate with known derivative
    x = rng.standard_normal(10)
    f = lambda t: ad.sum_(ad.tanh(t) * ad.exp(-1.0 * t * t))
    assert ad.grad_check(f, x) < 1e-6


def test_grad_check_non_finite_raises():
    with pytest.raises(NumericError):
        ad.grad_check(lambda x: ad.sum_(ad.log(x)), np.array([-1.0]))


PRIMITIVES = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (ad.exp(b) + 0.5),
    "matmul": lambda a, b: ad.matmul(a, ad.reshape(b, (4, 3))),
    "exp": lambda a, b: ad.exp(a),
    "log": lambda a, b: ad.log(ad.exp(a) + 1.0),
    "tanh": lambda a, b: ad.tanh(a),
    "leaky_relu": lambda a, b: ad.leaky_relu(a),
    "softplus": lambda a, b: ad.softplus(a),
    "softmax": lambda a, b: ad.softmax(a),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
    "slice": lambda a, b: a[1:, ::2],
    "sum": lambda a, b: ad.sum_(a, axis=0),
    "mean": lambda a, b: ad.mean(a, axis=1, keepdims=True),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_100_points(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    op = PRIMITIVES[name]
    weights = {}
    worst = 0.0
    for _ in range(100):
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((3, 4))
        if name == "leaky_relu":
            a0 = np.where(np.abs(a0) < 1e-3, 0.1, a0)   # kink
        out = op(ad.as_tensor(a0), ad.as_tensor(b0))
        w = weights.setdefault(out.shape, rng.standard_normal(out.shape))
        fa = lambda t: ad.sum_(op(t, ad.as_tensor(b0)) * w)
        fb = lambda t: ad.sum_(op(ad.as_tensor(a0), t) * w)
        worst = max(worst, ad.grad_check(fa, a0))
        if name in ("add", "sub", "mul", "div", "matmul", "concat"):
            worst = max(worst, ad.grad_check(fb, b0))
    assert worst < 1e-4


def test_broadcast_gradients(rng):
    a0, b0 = rng.standard_normal((5, 3)), rng.standard_normal(3)
    assert ad.grad_check(lambda b: ad.sum_(ad.as_tensor(a0) * b * b), b0) < 1e-6


def test_gradient_linearity(rng):
    x0 = rng.standard_normal(6)
    f1 = lambda t: ad.sum_(ad.tanh(t))
    f2 = lambda t: ad.sum_(t * t * t)
    grads = []
    for f in (f1, f2, lambda t: f1(t) + f2(t)):
        x = leaf(x0)
        ad.backward(f(x))
        grads.append(x.grad)
    assert np.allclose(grads[0] + grads[1], grads[2], rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(xs):
    out = ad.softmax(ad.as_tensor(np.array(xs)[None]))
    assert abs(out.value.sum() - 1.0) < 1e-12


def test_param_store_unique_names():
    ps = ad.ParamStore()
    ps.add("w", np.zeros(2))
    with pytest.raises(Exception):
        ps.add("w", np.zeros(2))


def test_param_store_roundtrip():
    ps = ad.ParamStore()
    ps.add("w", np.arange(6.0).reshape(2, 3))
    other = ad.ParamStore()
    other.add("w", np.zeros((2, 3)))
    other.load_dict(ps.to_dict())
    assert np.array_equal(other["w"].value, ps["w"].value)


def test_adam_zero_gradient_is_noop_and_adamw_decays():
    for kind, expect_change in (("adam", False), ("adamw", True)):
        ps = ad.ParamStore()
        p = ps.add("w", np.ones(3))
        opt = ad.make_optimizer(kind, ps)
        p.grad = np.zeros(3)
        opt.step(1e-2)
        changed = not np.array_equal(p.value, np.ones(3))
        assert changed == expect_change
        if expect_change:
            assert np.allclose(p.value, 1.0 - 1e-2 * 1e-4)


def test_no_grad_records_nothing():
    a = leaf(1.0)
    with ad.no_grad():
        y = a * 2.0
    assert not y.requires_grad and y.parents == ()
