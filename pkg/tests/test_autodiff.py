import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softvqa import autodiff as ad


def _fd(f, x, h=1e-6):
    """Central differences of a scalar numpy function."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestForwardValues:
    def test_sigmoid_of_two(self):
        expected = 1.0 / (1.0 + math.exp(-2.0))
        assert ad.sigmoid(ad.tensor(2.0)).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.880797, abs=1e-6)

    def test_sigmoid_is_stable_at_extremes(self):
        out = ad.sigmoid(ad.tensor(np.array([-1000.0, 0.0, 1000.0]))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-300)

    def test_softmax_of_zeros_is_uniform(self):
        np.testing.assert_allclose(ad.softmax(ad.tensor(np.zeros(3))).data, np.full(3, 1 / 3))

    def test_softmax_temperature(self):
        x = np.array([1.0, 2.0, 0.5])
        e = np.exp(x / 0.1)
        np.testing.assert_allclose(ad.softmax(ad.tensor(x), temperature=0.1).data, e / e.sum())

    def test_conv1d_shift_is_pointer_push(self):
        out = ad.conv1d(ad.tensor(np.array([0.0, 1.0, 0.0, 0.0])), [0, 0, 1]).data
        np.testing.assert_array_equal(out, [0, 0, 1, 0])

    def test_conv1d_drops_mass_at_boundaries(self):
        np.testing.assert_array_equal(ad.conv1d(ad.tensor(np.array([0.0, 0, 1])), [0, 0, 1]).data, [0, 0, 0])
        np.testing.assert_array_equal(ad.conv1d(ad.tensor(np.array([1.0, 0, 0])), [1, 0, 0]).data, [0, 0, 0])

    def test_conv1d_matches_hand_unrolled_convolution(self, rng):
        a = rng.normal(size=(2, 7))
        k = rng.normal(size=3)
        ref = np.zeros_like(a)
        for i in range(7):
            for t in range(3):
                j = i - (t - 1)
                if 0 <= j < 7:
                    ref[:, i] += k[t] * a[:, j]
        np.testing.assert_allclose(ad.conv1d(ad.tensor(a), k).data, ref, atol=1e-14)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = ad.tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        ad.sum(x).backward()
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_comparison_gradient_matches_finite_differences(self):
        m1 = ad.tensor(1.0, requires_grad=True)
        m2 = ad.tensor(0.2, requires_grad=True)
        ad.sigmoid((m1 - m2 - 0.5) / 0.25).backward()
        numeric = _fd(lambda v: 1 / (1 + np.exp(-(v[0] - 0.2 - 0.5) / 0.25)), [1.0])[0]
        assert float(m1.grad) == pytest.approx(numeric, rel=1e-6)
        sg = 1 / (1 + math.exp(-1.2))
        assert float(m1.grad) == pytest.approx(sg * (1 - sg) / 0.25, abs=1e-12)

    def test_min_tie_routes_to_first_argument(self):
        a = ad.tensor(0.3, requires_grad=True)
        b = ad.tensor(0.3, requires_grad=True)
        ad.minimum(a, b).backward()
        assert float(a.grad) == 1.0 and float(b.grad) == 0.0

    def test_max_reduction_tie_routes_to_first_index(self):
        x = ad.tensor(np.array([0.2, 0.7, 0.7]), requires_grad=True)
        ad.max(x).backward()
        np.testing.assert_array_equal(x.grad, [0, 1, 0])

    def test_shared_subexpression_accumulates(self):
        x = ad.tensor(3.0, requires_grad=True)
        y = x * x + x
        y.backward()
        assert float(x.grad) == pytest.approx(7.0)

    def test_no_grad_records_nothing(self):
        x = ad.tensor(2.0, requires_grad=True)
        with ad.no_grad():
            y = x * 3.0
        assert not y.requires_grad

    def test_tape_is_topological(self):
        x = ad.tensor(np.ones(3), requires_grad=True)
        y = ad.sum(ad.tanh(x) * ad.exp(x))
        assert ad.ComputationTape.from_output(y).is_topological()

    def test_complex_expression_against_finite_differences(self, rng):
        x0 = rng.normal(size=(3, 4))
        w0 = rng.normal(size=(4, 2))

        def f_np(xw):
            x, w = xw[:12].reshape(3, 4), xw[12:].reshape(4, 2)
            z = np.tanh(x @ w)
            e = np.exp(z - z.max(axis=1, keepdims=True))
            return float(np.sum(np.log(e / e.sum(axis=1, keepdims=True) + 1.0)))

        x = ad.tensor(x0, requires_grad=True)
        w = ad.tensor(w0, requires_grad=True)
        out = ad.sum(ad.log(ad.softmax(ad.tanh(x @ w), axis=1) + 1.0))
        out.backward()
        numeric = _fd(f_np, np.concatenate([x0.ravel(), w0.ravel()]))
        np.testing.assert_allclose(np.concatenate([x.grad.ravel(), w.grad.ravel()]), numeric, rtol=1e-6, atol=1e-8)


class TestShapesAndDomains:
    def test_mismatched_elementwise_shapes_raise(self):
        with pytest.raises(ad.ShapeError):
            ad.tensor(np.ones(3)) + ad.tensor(np.ones(4))

    def test_scalar_broadcast_is_allowed(self):
        np.testing.assert_array_equal((ad.tensor(np.ones(3)) * 2.0).data, [2, 2, 2])

    def test_log_of_nonpositive_raises_in_checked_mode(self):
        with ad.checked(True):
            with pytest.raises(ad.DomainError):
                ad.log(ad.tensor(np.array([1.0, 0.0])))

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            ad.embedding(ad.tensor(np.ones((3, 2))), [3])

    def test_precision_modes(self):
        with ad.precision("standard"):
            assert ad.tensor([1.0, 2.0]).data.dtype == np.float32
        with ad.precision("high"):
            assert ad.tensor([1.0, 2.0]).data.dtype == np.float64

    def test_unknown_precision(self):
        with pytest.raises(ValueError):
            ad.set_precision("quad")


class TestGradientCheck:
    def test_passes_on_smooth_function(self, rng):
        x = ad.tensor(rng.normal(size=5))
        rep = ad.gradient_check(lambda: ad.sum(ad.sigmoid(x) * ad.tanh(x)), x)
        assert rep.passed, str(rep)

    def test_equal_integer_formula(self):
        a, b = ad.tensor(2.0), ad.tensor(3.1)
        rep = ad.gradient_check(lambda: ad.sigmoid((0.25 - ad.abs(a - b)) / 0.125), [a, b])
        assert rep.passed and rep.max_rel_error < 1e-4

    def test_constant_function_has_zero_gradients(self):
        a, b = ad.tensor(1.0), ad.tensor(2.0)
        rep = ad.gradient_check(lambda: ad.constant(4.0) + 0.0 * (a + b), [a, b])
        assert rep.passed
        assert all(np.all(g == 0) for g in rep.analytic)

    def test_detects_a_wrong_gradient(self):
        x = ad.tensor(np.array([0.3, -0.2]))

        def bad():
            # a custom op whose vjp is deliberately off by a factor 2
            return ad._make(np.sum(x.data ** 2), (x,), lambda g: (4.0 * g * x.data,), "bad")

        rep = ad.gradient_check(bad, x)
        assert not rep.passed


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_softmax_rows_sum_to_one(values):
    out = ad.softmax(ad.tensor(np.array(values))).data
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(out > 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=8), st.integers(0, 2))
def test_conv1d_vjp_is_adjoint(values, tap):
    """<conv(a), g> == <a, conv^T(g)> for a one-tap kernel."""
    a = np.array(values)
    g = np.linspace(-1, 1, a.size)
    k = np.zeros(3)
    k[tap] = 1.0
    t = ad.tensor(a, requires_grad=True)
    out = ad.conv1d(t, k)
    ad.sum(out * ad.constant(g)).backward()
    assert float(np.dot(out.data, g)) == pytest.approx(float(np.dot(a, t.grad)), abs=1e-12)
