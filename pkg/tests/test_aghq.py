"""Quadrature-based marginal likelihood.

Oracles: the closed-form Gaussian convolution (the per-step integrand is a
product of two Gaussians in the emission projection, so the marginal is
available exactly), hand-coded posterior mode and curvature formulas, and
the degenerate iid model whose full-sequence marginal factorizes.
"""

import math

import numpy as np
import pytest

from conftest import make_dataset, make_teacher
from lstmsel.aghq import (
    AghqConfig,
    StepMarginal,
    dataset_marginal,
    fit_aghq,
    rescore,
    sequence_marginal,
    step_marginal,
)
from lstmsel.lstm import (
    LstmParams,
    Sequence,
    dataset_log_likelihood,
    forward,
    init_params,
)
from lstmsel.numerics import EvaluationError, Rng, log_gaussian_pdf
from lstmsel.penalties import PenaltySpec, count_df
from lstmsel.training import TrainConfig, criteria_from, fit

NONE = PenaltySpec(kind="none", lam=0.0)


def convolution_oracle(params, h_tilde, y):
    """Exact marginal: y = w.h + b_y + eps with h ~ N(h_tilde, s^2 I)."""
    mean = float(params.w_y @ h_tilde) + params.b_y
    var = params.sigma2 + params.state_noise ** 2 * float(
        params.w_y @ params.w_y)
    return log_gaussian_pdf(y, mean, var)


def random_step(r, hid):
    params = init_params(int(r.child(0).integers(1, 4)), hid, r.child(1),
                         state_noise=float(r.child(2).uniform(0.1, 1.0)))
    params.sigma2 = float(r.child(3).uniform(0.3, 2.0))
    params.w_y = r.child(4).standard_normal(hid)
    params.b_y = float(r.child(5).standard_normal())
    h_tilde = r.child(6).standard_normal(hid)
    y = float(r.child(7).standard_normal()) * 2.0
    return params, h_tilde, y


def degenerate_params(w=1.2, b_y=-0.4, sigma2=0.5, s=0.3) -> LstmParams:
    params = init_params(1, 1, Rng(0), state_noise=s)
    params.W[:] = 0.0
    params.U[:] = 0.0
    params.b[:] = 0.0
    params.w_y[:] = w
    params.b_y = b_y
    params.sigma2 = sigma2
    return params


class TestStepMarginal:
    def test_matches_convolution_oracle_across_orders(self, rng):
        worst = 0.0
        for i in range(100):
            r = rng.child(i)
            hid = int(r.child(90).integers(1, 5))
            params, h_tilde, y = random_step(r, hid)
            exact = convolution_oracle(params, h_tilde, y)
            for k in (1, 3, 5, 9):
                sm = step_marginal(params, h_tilde, y, AghqConfig(k=k))
                worst = max(worst, abs(sm.logmarg - exact))
        assert worst < 1e-9

    def test_mode_scale_and_state_formulas(self, rng):
        params, h_tilde, y = random_step(rng.child(200), 3)
        sm = step_marginal(params, h_tilde, y)
        w = params.w_y
        s2 = params.state_noise ** 2
        m_u = float(w @ h_tilde)
        v_u = s2 * float(w @ w)
        prec = 1.0 / params.sigma2 + 1.0 / v_u
        u_hat = ((y - params.b_y) / params.sigma2 + m_u / v_u) / prec
        assert abs(sm.u_mode - u_hat) < 1e-9
        assert abs(sm.scale - 1.0 / math.sqrt(prec)) < 1e-12
        expected_mode = h_tilde + w * (u_hat - m_u) / float(w @ w)
        assert np.allclose(sm.mode, expected_mode, atol=1e-9)

    def test_zero_readout_branch(self):
        params = degenerate_params(w=0.0, b_y=0.0, sigma2=1.0)
        params.w_y[:] = 0.0
        h_tilde = np.array([0.7])
        sm = step_marginal(params, h_tilde, 0.0)
        assert abs(sm.logmarg - (-0.5 * math.log(2.0 * math.pi))) < 1e-15
        assert np.array_equal(sm.mode, h_tilde)
        assert sm.scale == 0.0

    def test_tiny_state_noise_recovers_deterministic_term(self, rng):
        params, h_tilde, y = random_step(rng.child(201), 2)
        params.state_noise = 1e-8
        sm = step_marginal(params, h_tilde, y)
        det = log_gaussian_pdf(y, float(params.w_y @ h_tilde) + params.b_y,
                               params.sigma2)
        assert abs(sm.logmarg - det) < 1e-6

    def test_exact_flag_equals_quadrature(self, rng):
        params, h_tilde, y = random_step(rng.child(202), 2)
        a = step_marginal(params, h_tilde, y, AghqConfig(k=1))
        b = step_marginal(params, h_tilde, y, exact=True)
        assert abs(a.logmarg - b.logmarg) < 1e-10

    def test_deterministic_params_rejected(self, rng):
        params, h_tilde, y = random_step(rng.child(203), 2)
        params.state_noise = 0.0
        with pytest.raises(ValueError, match="state_noise"):
            step_marginal(params, h_tilde, y)

    def test_shape_mismatch_rejected(self, rng):
        params, _, y = random_step(rng.child(204), 2)
        with pytest.raises(ValueError, match="h_tilde"):
            step_marginal(params, np.zeros(3), y)

    def test_non_finite_contribution_raises(self, rng):
        params, h_tilde, _ = random_step(rng.child(205), 2)
        with pytest.raises(EvaluationError):
            step_marginal(params, h_tilde, 1e200, t=4)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AghqConfig(k=0)
        with pytest.raises(ValueError):
            AghqConfig(k=65)
        with pytest.raises(ValueError):
            AghqConfig(newton_max=0)
        with pytest.raises(ValueError):
            AghqConfig(newton_tol=0.0)
        with pytest.raises(ValueError):
            AghqConfig(state_noise=-0.1)
        with pytest.raises(ValueError):
            AghqConfig(refit_epochs=-1)


class TestSequenceMarginal:
    def test_iid_degenerate_model_factorizes(self):
        # all gate weights zero: every step is the same linear-Gaussian
        # integral, so the sequence marginal is a sum of closed forms
        params = degenerate_params()
        y = np.array([0.3, -0.8, 1.1, 0.05, 2.0])
        seq = Sequence(inputs=np.zeros((5, 1)), targets=y, seq_id="d")
        var = params.sigma2 + params.state_noise ** 2 * float(
            params.w_y[0]) ** 2
        exact = sum(log_gaussian_pdf(v, params.b_y, var) for v in y)
        total, steps = sequence_marginal(params, seq)
        assert abs(total - exact) < 1e-9
        assert len(steps) == 5
        assert [s.t for s in steps] == list(range(5))

    def test_single_step_equals_step_marginal(self, rng):
        teacher = make_teacher(2, 2, rng.child(0), sigma2=0.7)
        teacher.state_noise = 0.4
        x = rng.child(1).standard_normal((1, 2))
        seq = Sequence(inputs=x, targets=np.array([0.9]), seq_id="one")
        det = forward(teacher, Sequence(inputs=x, targets=np.zeros(1),
                                        seq_id="probe"))
        total, steps = sequence_marginal(teacher, seq)
        sm = step_marginal(teacher, det.h[0], 0.9)
        assert abs(total - sm.logmarg) < 1e-12
        assert np.allclose(steps[0].mode, sm.mode, atol=1e-12)

    def test_quadrature_order_insensitive(self, rng):
        # the integrand is exactly Gaussian, so K does not matter
        teacher = make_teacher(2, 2, rng.child(2))
        teacher.state_noise = 0.5
        data = make_dataset(teacher, 2, 6, rng.child(3))
        for seq in data:
            lo, _ = sequence_marginal(teacher, seq, AghqConfig(k=9))
            hi, _ = sequence_marginal(teacher, seq, AghqConfig(k=15))
            assert abs(lo - hi) < 1e-9

    def test_tiny_noise_approaches_deterministic_likelihood(self, rng):
        teacher = make_teacher(2, 2, rng.child(4))
        data = make_dataset(teacher, 1, 6, rng.child(5))
        noisy = teacher.copy()
        noisy.state_noise = 1e-8
        total, _ = sequence_marginal(noisy, data[0])
        ll = dataset_log_likelihood(teacher, [data[0]])
        assert abs(total - ll) < 1e-4

    def test_error_carries_step_index(self):
        params = degenerate_params()
        y = np.array([0.0, 0.0, 1e200, 0.0])
        seq = Sequence(inputs=np.zeros((4, 1)), targets=y, seq_id="bad")
        with pytest.raises(EvaluationError) as exc:
            sequence_marginal(params, seq)
        assert exc.value.coordinate == 2

    def test_input_width_mismatch(self, rng):
        teacher = make_teacher(2, 2, rng.child(6))
        teacher.state_noise = 0.3
        seq = Sequence(inputs=np.zeros((3, 1)), targets=np.zeros(3),
                       seq_id="w")
        with pytest.raises(ValueError, match="width"):
            sequence_marginal(teacher, seq)


class TestDatasetMarginal:
    def test_matches_python_filter(self, rng):
        teacher = make_teacher(3, 2, rng.child(10))
        teacher.state_noise = 0.4
        data = make_dataset(teacher, 3, 7, rng.child(11))
        # mixed lengths: exercise the grouped kernel path
        data[1] = Sequence(inputs=data[1].inputs[:4],
                           targets=data[1].targets[:4],
                           seq_id=data[1].seq_id)
        slow = sum(sequence_marginal(teacher, s)[0] for s in data)
        fast = dataset_marginal(teacher, data)
        assert abs(slow - fast) < 1e-9

    def test_exact_flag_matches_python(self, rng):
        teacher = make_teacher(2, 2, rng.child(12))
        teacher.state_noise = 0.6
        data = make_dataset(teacher, 2, 5, rng.child(13))
        slow = sum(sequence_marginal(teacher, s, exact=True)[0]
                   for s in data)
        fast = dataset_marginal(teacher, data, exact=True)
        assert abs(slow - fast) < 1e-9

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            dataset_marginal(degenerate_params(), [])

    def test_error_carries_sequence_index(self):
        params = degenerate_params()
        good = Sequence(inputs=np.zeros((3, 1)), targets=np.zeros(3),
                        seq_id="g")
        bad = Sequence(inputs=np.zeros((3, 1)),
                       targets=np.array([0.0, 1e200, 0.0]), seq_id="b")
        with pytest.raises(EvaluationError):
            dataset_marginal(params, [good, bad])


class TestFitAghq:
    def test_zero_epochs_returns_scored_init(self, rng):
        teacher = make_teacher(2, 2, rng.child(20))
        data = make_dataset(teacher, 2, 4, rng.child(21))
        aghq = AghqConfig(state_noise=0.3)
        res = fit_aghq(data, NONE, TrainConfig(restarts=1), seed=0,
                       hidden=2, aghq=aghq, init=teacher, epochs=0)
        expected = teacher.copy()
        expected.state_noise = 0.3
        assert np.array_equal(res.params.to_vector(), expected.to_vector())
        assert res.loglik == dataset_marginal(expected, data, aghq)
        assert res.loglik_kind == "aghq"
        assert len(res.objective_trace) == 1
        aic, bic = criteria_from(res.loglik, res.df, res.n_obs)
        assert res.aic == aic and res.bic == bic

    def test_short_fit_improves_bound(self, rng):
        teacher = make_teacher(1, 1, rng.child(22))
        data = make_dataset(teacher, 2, 4, rng.child(23), noise_sd=0.1)
        cfg = TrainConfig(learning_rate=0.05, max_epochs=10, restarts=1)
        res = fit_aghq(data, NONE, cfg, seed=1, hidden=1)
        assert res.objective_trace[-1] < res.objective_trace[0]
        assert res.df == count_df(res.params, NONE)

    def test_free_mask_freezes_coordinates(self, rng):
        teacher = make_teacher(1, 1, rng.child(24))
        data = make_dataset(teacher, 2, 4, rng.child(25), noise_sd=0.1)
        lay_size = teacher.n_params
        mask = np.zeros(lay_size, dtype=bool)
        mask[-3:] = True  # w_y, b_y, noise stay free; weights frozen
        cfg = TrainConfig(learning_rate=0.05, max_epochs=6, restarts=1)
        spec = PenaltySpec(kind="lasso", lam=0.5)
        res = fit_aghq(data, spec, cfg, seed=2, hidden=1, init=teacher,
                       free_mask=mask)
        got = res.params.to_vector()
        want = teacher.to_vector()
        assert np.array_equal(got[:-3], want[:-3])
        assert not np.array_equal(got[-3:], want[-3:])

    def test_bad_mask_shape_rejected(self, rng):
        teacher = make_teacher(1, 1, rng.child(26))
        data = make_dataset(teacher, 1, 3, rng.child(27))
        with pytest.raises(ValueError, match="free_mask"):
            fit_aghq(data, NONE, TrainConfig(), seed=0, hidden=1,
                     init=teacher, free_mask=np.ones(3, dtype=bool))

    def test_rerun_is_bit_identical(self, rng):
        teacher = make_teacher(1, 1, rng.child(28))
        data = make_dataset(teacher, 2, 3, rng.child(29))
        cfg = TrainConfig(learning_rate=0.05, max_epochs=4, restarts=1)
        a = fit_aghq(data, NONE, cfg, seed=3, hidden=1)
        b = fit_aghq(data, NONE, cfg, seed=3, hidden=1)
        assert np.array_equal(a.params.to_vector(), b.params.to_vector())
        assert a.loglik == b.loglik

    def test_negative_epochs_rejected(self, rng):
        teacher = make_teacher(1, 1, rng.child(30))
        data = make_dataset(teacher, 1, 3, rng.child(31))
        with pytest.raises(ValueError, match="epochs"):
            fit_aghq(data, NONE, TrainConfig(), seed=0, hidden=1, epochs=-1)


class TestRescore:
    def test_replaces_likelihood_and_criteria(self, rng):
        teacher = make_teacher(2, 2, rng.child(40))
        data = make_dataset(teacher, 3, 5, rng.child(41))
        cfg = TrainConfig(learning_rate=0.02, max_epochs=20, restarts=1)
        base = fit(data, seed=1, spec=NONE, cfg=cfg, hidden=2)
        aghq = AghqConfig(state_noise=0.2)
        scored = rescore(base, data, aghq)
        assert scored.loglik_kind == "aghq"
        assert scored.df == base.df
        expect = base.params.copy()
        expect.state_noise = 0.2
        assert scored.loglik == dataset_marginal(expect, data, aghq)
        aic, bic = criteria_from(scored.loglik, scored.df, scored.n_obs)
        assert scored.aic == aic and scored.bic == bic

    def test_bound_ordering_against_variational(self):
        # on the degenerate conjugate model the AGHQ marginal is exact, so
        # it must dominate any variational lower bound of the same model
        from lstmsel.variational import ViConfig, fit_vi

        params = degenerate_params(w=1.0, b_y=0.5, sigma2=0.25, s=0.5)
        y = np.array([0.3, -0.8, 1.1, 0.05])
        seq = Sequence(inputs=np.zeros((4, 1)), targets=y, seq_id="d0")
        exact = sum(log_gaussian_pdf(v, params.b_y,
                                     params.sigma2 + 0.25) for v in y)
        total, _ = sequence_marginal(params, seq)
        assert abs(total - exact) < 1e-8
        vi = ViConfig(state_noise=0.5, transition="closed_form", eval_n_mc=1)
        cfg = TrainConfig(learning_rate=0.003, max_epochs=500, restarts=1,
                          tol=0.0)
        res, _ = fit_vi([seq], NONE, cfg, seed=0, hidden=1, vi=vi,
                        init=params, train_theta=False)
        assert res.loglik <= total + 1e-8
