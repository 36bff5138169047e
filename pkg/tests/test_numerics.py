import math

import numpy as np
import pytest

from lstmsel.numerics import (
    EvaluationError,
    Rng,
    finite_diff_grad,
    gauss_hermite_rule,
    log_gaussian_pdf,
    logsumexp,
    stable_sigmoid,
    stable_tanh,
)


def hermite_moment(k: int) -> float:
    """integral of x^k exp(-x^2) dx via the two-term recursion.

    m_0 = sqrt(pi), odd moments vanish, m_k = (k-1)/2 * m_{k-2}.
    """
    if k % 2 == 1:
        return 0.0
    m = math.sqrt(math.pi)
    for d in range(2, k + 1, 2):
        m *= (d - 1) / 2.0
    return m


def hermite_abs_moment(k: int) -> float:
    """integral of |x|^k exp(-x^2) dx; same recursion, base a_1 = 1."""
    m = math.sqrt(math.pi) if k % 2 == 0 else 1.0
    for d in range(2 if k % 2 == 0 else 3, k + 1, 2):
        m *= (d - 1) / 2.0
    return m


class TestGaussHermite:
    def test_order_one(self):
        rule = gauss_hermite_rule(1)
        assert rule.nodes.tolist() == [0.0]
        assert abs(rule.weights[0] - math.sqrt(math.pi)) < 1e-15

    def test_order_two_closed_form(self):
        rule = gauss_hermite_rule(2)
        expected = 1.0 / math.sqrt(2.0)
        assert np.allclose(np.sort(rule.nodes), [-expected, expected],
                           atol=1e-14)
        assert np.allclose(rule.weights,
                           [math.sqrt(math.pi) / 2] * 2, atol=1e-14)

    def test_monomial_exactness_through_15(self):
        # degree <= 2K-1 must integrate exactly against exp(-x^2)
        for order in range(1, 16):
            rule = gauss_hermite_rule(order)
            for k in range(0, 2 * order):
                got = float(np.sum(rule.weights * rule.nodes ** k))
                want = hermite_moment(k)
                # odd moments vanish; measure cancellation against the
                # magnitude of the summed terms
                scale = want if want != 0.0 else hermite_abs_moment(k)
                assert abs(got - want) / scale < 1e-10, (order, k)

    def test_x8_against_order_five(self):
        rule = gauss_hermite_rule(5)
        got = float(np.sum(rule.weights * rule.nodes ** 8))
        assert abs(got - 105.0 * math.sqrt(math.pi) / 16.0) < 1e-10

    def test_symmetry_and_weight_sum(self):
        for order in (1, 2, 7, 16, 33, 64):
            rule = gauss_hermite_rule(order)
            assert np.array_equal(rule.nodes, -rule.nodes[::-1])
            assert np.array_equal(rule.weights, rule.weights[::-1])
            assert np.all(rule.weights > 0)
            assert abs(np.sum(rule.weights) - math.sqrt(math.pi)) < 1e-12

    @pytest.mark.parametrize("bad", [0, -3, 65, 2.5, "9"])
    def test_rejects_bad_order(self, bad):
        with pytest.raises(ValueError):
            gauss_hermite_rule(bad)


class TestRng:
    def test_same_pair_is_bit_identical(self):
        a = Rng(123, 7).standard_normal(64)
        b = Rng(123, 7).standard_normal(64)
        assert np.array_equal(a, b)

    def test_child_streams_reproducible(self):
        a = Rng(5).child(3).standard_normal(16)
        b = Rng(5).child(3).standard_normal(16)
        assert np.array_equal(a, b)

    def test_distinct_children_do_not_collide(self):
        base = Rng(99)
        draws = [base.child(i).standard_normal(10_000) for i in range(6)]
        for i in range(len(draws)):
            for j in range(i + 1, len(draws)):
                assert not np.array_equal(draws[i], draws[j])

    def test_child_differs_from_parent(self):
        parent = Rng(4, 2)
        child = Rng(4, 2).child(0)
        assert not np.array_equal(parent.standard_normal(100),
                                  child.standard_normal(100))

    def test_nested_children_distinct(self):
        r = Rng(11)
        a = r.child(1).child(2).standard_normal(1000)
        b = r.child(2).child(1).standard_normal(1000)
        assert not np.array_equal(a, b)

    def test_permutation_is_valid(self):
        perm = Rng(0).permutation(20)
        assert sorted(perm.tolist()) == list(range(20))


class TestScalarMaps:
    def test_sigmoid_center(self):
        assert stable_sigmoid(0.0) == 0.5
        assert stable_tanh(0.0) == 0.0

    def test_sigmoid_saturation_no_overflow(self):
        lo = stable_sigmoid(-1000.0)
        hi = stable_sigmoid(1000.0)
        assert 0.0 <= lo <= 1e-300
        assert hi == 1.0
        arr = stable_sigmoid(np.array([-1e4, -1.0, 0.0, 1.0, 1e4]))
        assert np.all(np.isfinite(arr))
        assert np.all((arr >= 0) & (arr <= 1))

    def test_log_gaussian_standard_normal_at_mode(self):
        want = -0.5 * math.log(2 * math.pi)
        assert abs(log_gaussian_pdf(0.0, 0.0, 1.0) - want) < 1e-12

    def test_log_gaussian_matches_dense_formula(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal(50)
        m = rng.standard_normal(50)
        v = rng.uniform(0.1, 3.0, 50)
        got = log_gaussian_pdf(y, m, v)
        want = -0.5 * (np.log(2 * np.pi * v) + (y - m) ** 2 / v)
        assert np.allclose(got, want, atol=1e-14)

    @pytest.mark.parametrize("v", [0.0, -1.0, np.nan])
    def test_log_gaussian_rejects_bad_variance(self, v):
        with pytest.raises(ValueError):
            log_gaussian_pdf(0.0, 0.0, v)


class TestFiniteDiff:
    def test_quadratic(self):
        grad = finite_diff_grad(lambda t: float(t @ t), np.array([1.0, 2.0]))
        assert np.allclose(grad, [2.0, 4.0], atol=1e-8)

    def test_constant(self):
        grad = finite_diff_grad(lambda t: 3.25, np.zeros(4))
        assert np.array_equal(grad, np.zeros(4))

    def test_reports_offending_coordinate(self):
        def bad(t):
            return float("nan") if t[1] > 0.5 else 0.0

        with pytest.raises(EvaluationError) as err:
            finite_diff_grad(bad, np.array([0.0, 0.5]))
        assert err.value.coordinate == 1

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda t: 0.0, np.zeros(2), step=0.0)


class TestLogSumExp:
    def test_matches_naive_on_moderate_values(self):
        vals = np.array([-1.0, 0.5, 2.0])
        assert abs(logsumexp(vals) - math.log(np.sum(np.exp(vals)))) < 1e-12

    def test_extreme_values_stay_finite(self):
        assert abs(logsumexp(np.array([-2000.0, -2000.0]))
                   - (-2000.0 + math.log(2.0))) < 1e-9
        assert abs(logsumexp(np.array([1000.0, 0.0])) - 1000.0) < 1e-12

    def test_axis_reduction(self):
        vals = np.arange(6.0).reshape(2, 3)
        got = logsumexp(vals, axis=1)
        want = np.log(np.sum(np.exp(vals), axis=1))
        assert np.allclose(got, want, atol=1e-12)
