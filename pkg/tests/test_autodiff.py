import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from taskweight import autodiff as ad
from taskweight.autodiff import NumericalError, ShapeError, Tensor, backward, grad_check


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


class TestForward:
    def test_add_zero_is_identity(self, rng):
        x = rng.standard_normal((3, 4))
        out = ad.forward(lambda a: a + 0.0, x)
        np.testing.assert_array_equal(out.data, x)

    def test_exp_log_inverse(self, rng):
        x = rng.uniform(0.01, 10.0, size=50)
        out = ad.forward(lambda a: ad.exp(ad.log(a)), x)
        np.testing.assert_allclose(out.data, x, rtol=0, atol=1e-12 * x.max())

    def test_product(self):
        assert ad.forward(lambda a, b: a * b, 2.0, 3.0).item() == 6.0

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_non_finite_output_raises(self):
        with pytest.raises(NumericalError):
            ad.forward(lambda a: a * np.inf, np.ones(2))


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        (g,) = backward(x * x, [x])
        assert g == pytest.approx(6.0)

    def test_unused_leaf_gets_zero(self):
        x, y = leaf([1.0, 2.0]), leaf([[5.0]])
        gx, gy = backward(ad.sum_(x * 2.0), [x, y])
        np.testing.assert_array_equal(gx, [2.0, 2.0])
        np.testing.assert_array_equal(gy, np.zeros((1, 1)))

    def test_constant_output(self):
        x = leaf([1.0, 2.0])
        out = ad.sum_(x * 0.0) + 4.0
        np.testing.assert_array_equal(backward(out, [x])[0], 0.0)

    def test_non_scalar_raises(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ShapeError):
            backward(x * 2.0)

    def test_softmax_ce_gradient(self):
        # d/dlogits of -log softmax(logits)[2] = softmax - onehot(2)
        logits = np.array([1.0, 2.0, 3.0])
        x = leaf(logits)
        loss = -ad.log(ad.softmax(x))[2]
        (g,) = backward(loss, [x])
        p = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(g, p - np.array([0.0, 0.0, 1.0]), atol=1e-12)
        assert grad_check(lambda t: -ad.log(ad.softmax(t))[2], logits) < 1e-7

    def test_shared_subexpression_accumulates(self):
        x = leaf(2.0)
        y = x * x
        (g,) = backward(y * y + y, [x])  # x^4 + x^2
        assert g == pytest.approx(4 * 8 + 2 * 2)

    def test_grad_overwritten_not_accumulated(self):
        x = leaf(1.5)
        backward(x * x)
        backward(x * x)
        assert x.grad == pytest.approx(3.0)

    def test_linearity(self, rng):
        xv = rng.standard_normal((4, 3))
        alpha, beta = 1.7, -0.3

        def f(t):
            return ad.sum_(ad.tanh(t) * t)

        def g(t):
            return ad.sum_(ad.exp(t * 0.5))

        x = leaf(xv)
        gf = backward(f(x), [x])[0].copy()
        gg = backward(g(x), [x])[0].copy()
        gc = backward(alpha * f(x) + beta * g(x), [x])[0]
        np.testing.assert_allclose(gc, alpha * gf + beta * gg, rtol=0, atol=1e-12)

    def test_determinism(self, rng):
        xv = rng.standard_normal((5, 5))
        results = []
        for _ in range(2):
            x = leaf(xv)
            out = ad.sum_(ad.softmax(ad.matmul(x, x)) * ad.sigmoid(x))
            results.append((out.data.copy(), backward(out, [x])[0].copy()))
        assert results[0][0].tobytes() == results[1][0].tobytes()
        assert results[0][1].tobytes() == results[1][1].tobytes()


class TestGradCheck:
    def test_sum_is_exact(self, rng):
        # linear: no truncation error at any step, so a wide step keeps roundoff small
        for shape in [(3, 4), (10,), (2, 3, 5)]:
            assert grad_check(lambda t: ad.sum_(t), rng.standard_normal(shape), step=1e-3) < 1e-10

    def test_bad_step(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: ad.sum_(t), np.ones(2), step=0.0)

    def test_non_finite_raises(self):
        with pytest.raises(NumericalError):
            grad_check(lambda t: ad.sum_(t * np.inf), np.ones(2))

    def test_detects_wrong_gradient(self, rng):
        def bad(t):
            return ad.make_node(np.array((t.data ** 2).sum()), (t,), lambda g: (g * t.data,), "bad")

        assert grad_check(bad, rng.uniform(1, 2, 5)) > 0.1


# each primitive as a scalar function of one input array; domain chosen to avoid kinks
PRIMITIVES = {
    "add": (lambda t, c: ad.sum_((t + c) * c), "any"),
    "sub": (lambda t, c: ad.sum_((c - t) * c), "any"),
    "mul": (lambda t, c: ad.sum_(t * c * t), "any"),
    "div": (lambda t, c: ad.sum_(c / t), "pos"),
    "exp": (lambda t, c: ad.sum_(ad.exp(t) * c), "any"),
    "log": (lambda t, c: ad.sum_(ad.log(t) * c), "pos"),
    "power": (lambda t, c: ad.sum_(ad.power(t, 1.7) * c), "pos"),
    "tanh": (lambda t, c: ad.sum_(ad.tanh(t) * c), "any"),
    "sigmoid": (lambda t, c: ad.sum_(ad.sigmoid(t) * c), "any"),
    "leaky_relu": (lambda t, c: ad.sum_(ad.leaky_relu(t, 0.01) * c), "nonzero"),
    "softmax": (lambda t, c: -ad.sum_(ad.log(ad.softmax(ad.concat([t, t * 0.5], axis=-1)))[..., 0]), "any"),
    "clip": (lambda t, c: ad.sum_(ad.clip(t, -0.5, 0.5) * c), "noclip"),
    "matmul": (lambda t, c: ad.sum_(ad.matmul(t, ad.transpose(t)) * np.abs(c[..., :1])) + ad.sum_(t * 3.0), "pos"),
    "sum": (lambda t, c: ad.sum_(ad.sum_(t, axis=-1) ** 2), "any"),
    "mean": (lambda t, c: ad.sum_(ad.mean(t, axis=0) ** 2), "any"),
    "max": (lambda t, c: ad.sum_(ad.max_(t, axis=-1) * 1.3), "distinct"),
    "reshape": (lambda t, c: ad.sum_(ad.reshape(t, (-1,)) * c.reshape(-1)), "any"),
    "transpose": (lambda t, c: ad.sum_(ad.transpose(t) * c.T), "any"),
    "slice": (lambda t, c: ad.sum_(t[..., ::2] * c[..., ::2]), "any"),
    "concat": (lambda t, c: ad.sum_(ad.concat([t, t * 2.0], axis=-1) * np.abs(np.concatenate([c, c], -1))), "any"),
    "broadcast_to": (lambda t, c: ad.sum_(ad.broadcast_to(t[:1], t.shape) * c), "any"),
}


def _sample(rng, kind, shape):
    x = rng.uniform(-2.0, 2.0, shape)
    if kind == "pos":
        return rng.uniform(0.2, 3.0, shape)
    if kind == "nonzero":
        return np.where(np.abs(x) < 0.05, 0.3, x)
    if kind == "noclip":
        return np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.1, x)
    if kind == "distinct":
        return rng.permutation(np.arange(np.prod(shape), dtype=float)).reshape(shape) * 0.1 + 0.01 * x
    return x


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_grad_check(name):
    """Central-difference check on 100 random shapes and values per primitive."""
    fn, kind = PRIMITIVES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2 ** 32)
    worst = 0.0
    for _ in range(100):
        shape = tuple(rng.integers(1, 5, size=2))
        x = _sample(rng, kind, shape)
        c = rng.choice([-1.0, 1.0], shape) * rng.uniform(0.5, 1.5, shape)
        worst = max(worst, grad_check(lambda t: fn(t, c), x))
    assert worst < 1e-7, f"{name}: {worst:.3e}"


@given(st.floats(0.05, 0.95), st.floats(0.0, 3.0))
def test_log_power_clamped_finite(y, p):
    x = Tensor(np.array([y, 0.0, 1.0]))
    assert np.all(np.isfinite(ad.log(x).data))
    assert np.all(np.isfinite(ad.power(x, p).data))
    assert ad.log(Tensor(np.array(0.0))).item() == pytest.approx(math.log(1e-12))


def test_sigmoid_extremes():
    out = ad.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_broadcast_unbroadcast(rng):
    a, b = leaf(rng.standard_normal((3, 1))), leaf(rng.standard_normal(4))
    ga, gb = backward(ad.sum_(a * b), [a, b])
    np.testing.assert_allclose(ga[:, 0], np.full(3, b.data.sum()))
    np.testing.assert_allclose(gb, np.full(4, a.data.sum()))
