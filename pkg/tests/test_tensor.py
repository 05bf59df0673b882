import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import relative_error
from xtab.tensor import (
    NonFiniteError,
    OptimizerState,
    ParamSet,
    ShapeError,
    Tensor,
    adamw_step,
    bce_with_logits,
    concat,
    cross_entropy,
    default_dtype,
    dropout,
    embedding,
    kaiming_init,
    l2_normalize,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    mse,
    no_grad,
    numeric_tokens,
    numerical_grad,
    reglu,
    relu,
    sgd_step,
    softmax,
    verification_mode,
    zeros_init,
)


def leaf(values, dtype=np.float64):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True, dtype=dtype)


def check_grad(build, *leaves, tol=1e-6):
    """Compare backward() against central differences for every leaf."""
    for t in leaves:
        t.grad = None
    loss = build()
    loss.backward()
    analytic = [t.grad.copy() for t in leaves]
    for t, g in zip(leaves, analytic):
        t.grad = None
        with no_grad():
            numeric = numerical_grad(lambda: build().item(), t)
        assert relative_error(g, numeric) < tol


class TestDtypes:
    def test_default_is_float32(self):
        assert default_dtype() is np.float32
        assert Tensor([1.0, 2.0]).data.dtype == np.float32

    def test_verification_mode_switches_to_float64(self):
        with verification_mode():
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_hand_arithmetic(self):
        np.testing.assert_array_equal(matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data, [[11]])

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_of_sum_is_ones_times_b_transpose(self, rng):
        a = leaf(rng.normal(size=(4, 5)))
        b = leaf(rng.normal(size=(5, 3)))
        matmul(a, b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((4, 3)) @ b.data.T, rtol=1e-12)
        check_grad(lambda: (matmul(a, b) ** 2).sum(), a, b)

    def test_batched_broadcast_gradient(self, rng):
        a = leaf(rng.normal(size=(2, 3, 4, 5)))
        b = leaf(rng.normal(size=(3, 5, 2)))
        check_grad(lambda: (matmul(a, b) ** 2).sum(), a, b)


class TestSoftmax:
    @pytest.mark.parametrize(
        "x, expected",
        [([0.0, 0.0], [0.5, 0.5]), ([1000.0, 1000.0], [0.5, 0.5]), ([0.0, math.log(3)], [0.25, 0.75])],
    )
    def test_examples(self, x, expected):
        np.testing.assert_allclose(softmax(Tensor(x, dtype=np.float64)).data, expected, rtol=1e-12)

    def test_nan_input_raises(self):
        with pytest.raises(NonFiniteError):
            softmax(Tensor([0.0, np.nan]))

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one_and_positive(self, x):
        out = softmax(Tensor(x, dtype=np.float64), axis=-1).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_gradients(self, rng):
        x = leaf(rng.normal(size=(3, 4)))
        w = rng.normal(size=(3, 4))
        check_grad(lambda: (softmax(x, axis=0) * Tensor(w, dtype=np.float64)).sum(), x)
        check_grad(lambda: (log_softmax(x) * Tensor(w, dtype=np.float64)).sum(), x)


class TestLayerNorm:
    def _ln(self, x, gain, bias):
        x = Tensor(x, dtype=np.float64)
        n = x.shape[-1]
        return layer_norm(x, Tensor(np.full(n, gain), dtype=np.float64), Tensor(np.full(n, bias), dtype=np.float64)).data

    def test_constant_row(self):
        np.testing.assert_array_equal(self._ln([1.0, 1.0, 1.0], 1.0, 0.0), [0.0, 0.0, 0.0])

    def test_already_normalized(self):
        np.testing.assert_allclose(self._ln([-1.0, 1.0], 1.0, 0.0), [-1.0, 1.0], atol=1e-5)

    def test_affine_population_variance(self):
        # mean 2, population variance 8/3
        z = 2.0 / math.sqrt(8.0 / 3.0 + 1e-5)
        expected = [2 * -z + 1, 1.0, 2 * z + 1]
        np.testing.assert_allclose(self._ln([0.0, 2.0, 4.0], 2.0, 1.0), expected, rtol=1e-12)
        np.testing.assert_allclose(expected, [-1.4495, 1.0, 3.4495], atol=1e-4)

    def test_gradients(self, rng):
        x = leaf(rng.normal(size=(2, 3, 5)))
        g = leaf(rng.normal(size=5))
        b = leaf(rng.normal(size=5))
        w = Tensor(rng.normal(size=(2, 3, 5)), dtype=np.float64)
        check_grad(lambda: (layer_norm(x, g, b) * w).sum(), x, g, b)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.ones(2)))


class TestReglu:
    def test_examples(self):
        np.testing.assert_array_equal(reglu(Tensor([1, 2, 3, -1])).data, [3, 0])
        np.testing.assert_array_equal(reglu(Tensor([5, 5, 0, 0])).data, [0, 0])

    def test_odd_width(self):
        with pytest.raises(ShapeError):
            reglu(Tensor([1, 2, 3]))

    def test_gradient(self, rng):
        x = leaf(rng.normal(size=(4, 6)))
        w = Tensor(rng.normal(size=(4, 3)), dtype=np.float64)
        check_grad(lambda: (reglu(x) * w).sum(), x)


class TestDropout:
    def test_eval_identity(self, rng):
        x = Tensor(rng.normal(size=10))
        assert dropout(x, 0.5, training=False, rng=rng) is x

    def test_p_zero_identity(self, rng):
        x = Tensor(rng.normal(size=10))
        assert dropout(x, 0.0, training=True, rng=rng) is x

    def test_expectation(self, rng):
        out = dropout(Tensor(np.ones(10**6)), 0.5, training=True, rng=rng).data
        assert abs(out.mean() - 1.0) < 0.01
        assert set(np.unique(out)) <= {0.0, 2.0}

    @pytest.mark.parametrize("p", [1.0, 1.5, -0.1])
    def test_invalid_probability(self, p, rng):
        with pytest.raises(ValueError):
            dropout(Tensor([1.0]), p, training=True, rng=rng)


class TestBackward:
    def test_polynomial(self):
        x = leaf([3.0])
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_constant_root_leaves_no_gradient(self):
        x = leaf([1.0, 2.0])
        root = Tensor(5.0)
        root.backward()
        assert x.grad is None

    def test_non_scalar_root(self):
        with pytest.raises(ValueError):
            (leaf([1.0, 2.0]) * 2).backward()

    def test_accumulates_over_reuse(self, rng):
        """A tensor used twice gets the sum of both paths (oracle: two separate leaves)."""
        data = rng.normal(size=(3, 3))
        x = leaf(data)
        (matmul(x, x) * 1.0).sum().backward()
        a, b = leaf(data), leaf(data)
        matmul(a, b).sum().backward()
        np.testing.assert_allclose(x.grad, a.grad + b.grad, rtol=1e-12)

    def test_graph_freed(self, rng):
        x = leaf(rng.normal(size=3))
        y = (x * 2).sum()
        y.backward()
        assert y._parents == () and y._backward is None

    def test_non_finite_loss(self):
        x = leaf([0.0])
        with pytest.raises(NonFiniteError):
            x.log().sum().backward()

    def test_determinism(self):
        def run():
            r = np.random.default_rng(7)
            a = Tensor(r.normal(size=(5, 4)), requires_grad=True)
            b = Tensor(r.normal(size=(4, 3)), requires_grad=True)
            out = softmax(matmul(a, b)).sum() * 2
            out.backward()
            return out.data.tobytes(), a.grad.tobytes()

        assert run() == run()

    def test_elementwise_ops(self, rng):
        x = leaf(rng.uniform(0.5, 2.0, size=(2, 3)))
        y = leaf(rng.uniform(0.5, 2.0, size=(3,)))
        check_grad(lambda: ((x / y - y * 2.0 + x**3) * x.exp()).sum() + x.sqrt().mean(), x, y)
        check_grad(lambda: (x.log() + (-x) + (1.0 - x) ** 2).mean(axis=0).sum(), x)

    def test_structural_ops(self, rng):
        x = leaf(rng.normal(size=(2, 3, 4)))
        w = Tensor(rng.normal(size=(4, 3, 2)), dtype=np.float64)
        check_grad(lambda: (x.transpose(2, 1, 0) * w).sum(), x)
        check_grad(lambda: (x.reshape(6, 4)[1:4] ** 2).sum() + (x.swapaxes(0, 2)[[0, 0, 3]] ** 3).sum(), x)
        check_grad(lambda: (x[:, :1, :].broadcast_to((2, 5, 4)) * x.sum(axis=1, keepdims=True)).sum(), x)
        y = leaf(rng.normal(size=(2, 2, 4)))
        check_grad(lambda: (concat([x, y], axis=1) ** 2).sum(), x, y)


class TestFusedOps:
    def test_linear(self, rng):
        x = leaf(rng.normal(size=(2, 3, 4)))
        w = leaf(rng.normal(size=(4, 5)))
        b = leaf(rng.normal(size=5))
        np.testing.assert_allclose(linear(x, w, b).data, x.data @ w.data + b.data)
        check_grad(lambda: (linear(x, w, b) ** 2).sum(), x, w, b)

    def test_relu(self, rng):
        x = leaf(rng.normal(size=(6,)) + 0.05)
        check_grad(lambda: (relu(x) * x).sum(), x)

    def test_embedding(self, rng):
        table = leaf(rng.normal(size=(5, 3)))
        idx = np.array([[0, 4], [4, 2]])
        np.testing.assert_array_equal(embedding(table, idx).data, table.data[idx])
        check_grad(lambda: (embedding(table, idx) ** 2).sum(), table)
        with pytest.raises(IndexError):
            embedding(table, np.array([5]))

    def test_numeric_tokens(self, rng):
        w = leaf(rng.normal(size=(3, 4)))
        b = leaf(rng.normal(size=(3, 4)))
        vals = rng.normal(size=(2, 3))
        expected = vals[:, :, None] * w.data[None] + b.data[None]
        np.testing.assert_allclose(numeric_tokens(vals, w, b).data, expected)
        check_grad(lambda: (numeric_tokens(vals, w, b) ** 2).sum(), w, b)

    def test_l2_normalize(self, rng):
        x = leaf(rng.normal(size=(3, 4)))
        np.testing.assert_allclose(np.linalg.norm(l2_normalize(x).data, axis=-1), 1.0)
        w = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        check_grad(lambda: (l2_normalize(x) * w).sum(), x)
        zero = leaf(np.zeros((1, 3)))
        assert np.all(np.isfinite(l2_normalize(zero).data))

    def test_cross_entropy(self, rng):
        logits = leaf(rng.normal(size=(4, 3)))
        y = np.array([0, 2, 1, 2])
        z = logits.data
        oracle = np.mean([np.log(np.exp(z[i]).sum()) - z[i, y[i]] for i in range(4)])
        assert cross_entropy(logits, y).item() == pytest.approx(oracle, rel=1e-12)
        check_grad(lambda: cross_entropy(logits, y), logits)

    def test_bce(self, rng):
        logits = leaf(rng.normal(size=(5, 1)) * 3)
        y = np.array([0, 1, 1, 0, 1])
        p = 1 / (1 + np.exp(-logits.data[:, 0]))
        oracle = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert bce_with_logits(logits, y).item() == pytest.approx(oracle, rel=1e-10)
        check_grad(lambda: bce_with_logits(logits, y), logits)

    def test_mse(self, rng):
        pred = leaf(rng.normal(size=(4, 2)))
        target = rng.normal(size=(4, 2))
        assert mse(pred, target).item() == pytest.approx(np.mean((pred.data - target) ** 2))
        check_grad(lambda: mse(pred, target), pred)


class TestAdamW:
    def _params(self, value, decay=False):
        p = ParamSet()
        p.add("w", Tensor(np.asarray(value, dtype=np.float64), dtype=np.float64), decay=decay)
        return p

    def test_zero_grad_zero_decay_unchanged(self):
        p = self._params([1.0, -2.0])
        p["w"].grad = np.zeros(2)
        adamw_step(p, OptimizerState(lr=0.1, weight_decay=0.0))
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_hand_evaluated(self):
        p = self._params([0.5])
        p["w"].grad = np.ones(1)
        adamw_step(p, OptimizerState(lr=0.1, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8))
        # m_hat = 1, v_hat = 1  =>  step = lr * 1 / (1 + eps)
        assert p["w"].data[0] - 0.5 == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)

    def test_decoupled_decay(self, f64):
        p = self._params([2.0, -3.0], decay=True)
        p["w"].grad = np.zeros(2)
        adamw_step(p, OptimizerState(lr=1e-4, weight_decay=1e-5))
        np.testing.assert_allclose(p["w"].data, np.array([2.0, -3.0]) * (1 - 1e-9), rtol=0, atol=1e-15)

    def test_decay_only_on_flagged(self, f64):
        p = self._params([2.0])
        p["w"].grad = np.zeros(1)
        adamw_step(p, OptimizerState(lr=1e-2, weight_decay=0.5))
        np.testing.assert_array_equal(p["w"].data, [2.0])

    def test_missing_grad(self):
        p = self._params([1.0])
        with pytest.raises(RuntimeError):
            adamw_step(p, OptimizerState())

    def test_grads_cleared_and_step_counts(self):
        p = self._params([1.0])
        state = OptimizerState()
        for k in range(3):
            p["w"].grad = np.ones(1)
            adamw_step(p, state)
            assert p["w"].grad is None
            assert state.step == k + 1
            assert state.first_moment["w"].shape == p["w"].shape

    def test_matches_reference_formula(self, rng, f64):
        """Several steps against a direct transcription of the AdamW recurrences."""
        w0 = rng.normal(size=5)
        grads = rng.normal(size=(4, 5))
        lr, wd, b1, b2, eps = 1e-2, 1e-1, 0.9, 0.999, 1e-8
        p = self._params(w0, decay=True)
        state = OptimizerState(lr=lr, weight_decay=wd)
        w, m, v = w0.copy(), np.zeros(5), np.zeros(5)
        for t, g in enumerate(grads, start=1):
            p["w"].grad = g.copy()
            adamw_step(p, state)
            w = w - lr * wd * w
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        np.testing.assert_allclose(p["w"].data, w, rtol=1e-12)

    def test_sgd(self):
        p = self._params([1.0, 2.0])
        p["w"].grad = np.array([0.5, -1.0])
        sgd_step(p, 0.1)
        np.testing.assert_allclose(p["w"].data, [0.95, 2.1])


class TestInit:
    def test_bias_zero(self):
        np.testing.assert_array_equal(zeros_init((7,)).data, np.zeros(7))

    def test_bound(self, rng):
        w = kaiming_init((1000,), 6, rng).data
        assert np.all(np.abs(w) <= 1.0)

    def test_variance(self, rng):
        w = kaiming_init((10**6,), 6, rng).data.astype(np.float64)
        assert abs(w.var() - 1.0 / 3.0) / (1.0 / 3.0) < 0.02

    def test_bad_fan_in(self, rng):
        with pytest.raises(ValueError):
            kaiming_init((3,), 0, rng)


class TestParamSet:
    def test_order_and_flags(self):
        p = ParamSet()
        p.add("b", Tensor([1.0]), shared=True)
        p.add("a", Tensor([2.0]), decay=True)
        assert p.names() == ["b", "a"]
        assert p.shared_names() == ["b"]
        assert p.applies_decay("a") and not p.applies_decay("b")
        with pytest.raises(KeyError):
            p.add("a", Tensor([0.0]))

    def test_state_dict_round_trip_copies(self):
        p = ParamSet()
        p.add("w", Tensor([1.0, 2.0]))
        state = p.state_dict()
        state["w"][0] = 99.0
        assert p["w"].data[0] == 1.0
        p.load_state_dict({"w": np.array([3.0, 4.0])})
        np.testing.assert_array_equal(p["w"].data, [3.0, 4.0])
        with pytest.raises(ShapeError):
            p.load_state_dict({"w": np.zeros(3)})
        with pytest.raises(KeyError):
            p.load_state_dict({"nope": np.zeros(1)})
