"""Variational bound and its optimizer.

Oracles: a hand-coded conjugate-Gaussian posterior for the degenerate model
(all gate weights zero, so the hidden states are iid Gaussian and the exact
marginal likelihood is available in closed form), a pure-python frozen-noise
ELBO reimplementation for pathwise gradient checks, and closed-form
emission/entropy identities.
"""

import math

import numpy as np
import pytest

from conftest import assert_grad_close, make_dataset, make_teacher
from lstmsel.lstm import (
    CellState,
    LstmParams,
    Sequence,
    cell_step,
    dataset_log_likelihood,
    init_params,
)
from lstmsel.numerics import Rng, finite_diff_grad, log_gaussian_pdf
from lstmsel.penalties import PenaltySpec, count_df
from lstmsel.training import FitError, TrainConfig, criteria_from
from lstmsel.variational import (
    ElboEstimate,
    VariationalState,
    ViConfig,
    elbo,
    elbo_grad,
    fit_vi,
)

NONE = PenaltySpec(kind="none", lam=0.0)


def degenerate_params(w=1.0, b_y=0.5, sigma2=0.25, s=0.5) -> LstmParams:
    """All gate weights and biases zero: the one-step mean is identically
    zero, so h_t ~ N(0, s^2) iid and y_t ~ N(b_y, sigma2 + s^2 w^2) iid."""
    params = init_params(1, 1, Rng(0), state_noise=s)
    params.W[:] = 0.0
    params.U[:] = 0.0
    params.b[:] = 0.0
    params.w_y[:] = w
    params.b_y = b_y
    params.sigma2 = sigma2
    return params


def exact_degenerate_marginal(params, y):
    var = params.sigma2 + params.state_noise ** 2 * float(params.w_y[0]) ** 2
    return float(sum(log_gaussian_pdf(v, params.b_y, var) for v in y))


def exact_degenerate_posterior(params, y):
    """Per-step posterior of h_t given y_t by conjugate Bayes rule (H=1)."""
    w = float(params.w_y[0])
    s2 = params.state_noise ** 2
    prec = 1.0 / s2 + w * w / params.sigma2
    v = 1.0 / prec
    m = v * w * (y - params.b_y) / params.sigma2
    return m, v


def posterior_state(params, seq) -> VariationalState:
    m, v = exact_degenerate_posterior(params, seq.targets)
    return VariationalState(
        mode="free_form", hidden=1,
        mu={seq.seq_id: m[:, None]},
        log_sigma={seq.seq_id: np.full((seq.length, 1), 0.5 * math.log(v))},
    )


def frozen_elbo_reference(params, seq, mu, ls, eps):
    """Pure-python single-sample unpenalized ELBO.

    Samples h = mu + exp(ls) * eps, runs the cell step by step for the
    transition means (deterministic cell memory), and sums the closed-form
    emission and entropy terms.
    """
    T, hid = mu.shape
    sig = np.exp(ls)
    h = mu + sig * eps
    s2 = params.state_noise ** 2
    value = 0.0
    state = CellState(h=np.zeros(hid), c=np.zeros(hid))
    for t in range(T):
        nxt, _ = cell_step(params, state, seq.inputs[t])
        value += (-0.5 * hid * math.log(2.0 * math.pi * s2)
                  - float(np.sum((h[t] - nxt.h) ** 2)) / (2.0 * s2))
        state = CellState(h=h[t], c=nxt.c)
    for t in range(T):
        mean = float(params.w_y @ mu[t]) + params.b_y
        value += log_gaussian_pdf(seq.targets[t], mean, params.sigma2)
        value -= float(np.sum(np.exp(2.0 * ls[t]) * params.w_y ** 2)) / (
            2.0 * params.sigma2)
    value += float(np.sum(ls)) + ls.size * 0.5 * (math.log(2.0 * math.pi)
                                                  + 1.0)
    return value


def random_vi_instance(r, p, hid, T):
    params = init_params(p, hid, r.child(0), state_noise=0.0)
    params.W *= 0.6
    params.U *= 0.6
    params.state_noise = float(r.child(1).uniform(0.2, 1.0))
    params.sigma2 = float(r.child(2).uniform(0.3, 2.0))
    x = r.child(3).standard_normal((T, p))
    y = r.child(4).standard_normal(T)
    seq = Sequence(inputs=x, targets=y, seq_id="s0")
    mu = 0.5 * r.child(5).standard_normal((T, hid))
    ls = 0.3 * r.child(6).standard_normal((T, hid)) - 1.0
    return params, seq, mu, ls


class TestElboValue:
    def test_breakdown_identity(self, rng):
        params, seq, mu, ls = random_vi_instance(rng.child(0), 2, 2, 4)
        vstate = VariationalState(mode="free_form", hidden=2,
                                  mu={seq.seq_id: mu},
                                  log_sigma={seq.seq_id: ls})
        est = elbo(params, vstate, seq, PenaltySpec(kind="lasso", lam=0.7),
                   Rng(3), n_mc=2)
        assert isinstance(est, ElboEstimate)
        recomposed = est.emission + est.transition + est.entropy - est.penalty
        assert abs(est.value - recomposed) < 1e-12

    def test_single_sample_matches_reference(self, rng):
        # draw the noise from the same stream the estimator will use
        params, seq, mu, ls = random_vi_instance(rng.child(1), 2, 2, 5)
        vstate = VariationalState(mode="free_form", hidden=2,
                                  mu={seq.seq_id: mu},
                                  log_sigma={seq.seq_id: ls})
        eps = Rng(99).standard_normal((5, 1, 2))
        est = elbo(params, vstate, seq, NONE, Rng(99), n_mc=1)
        ref = frozen_elbo_reference(params, seq, mu, ls, eps[:, 0, :])
        assert abs(est.value - ref) < 1e-9

    def test_penalty_shifts_value_exactly(self, rng):
        params, seq, mu, ls = random_vi_instance(rng.child(2), 2, 2, 4)
        vstate = VariationalState(mode="free_form", hidden=2,
                                  mu={seq.seq_id: mu},
                                  log_sigma={seq.seq_id: ls})
        lam = 1.0
        spec = PenaltySpec(kind="lasso", lam=lam)
        a = elbo(params, vstate, seq, NONE, Rng(5), n_mc=3)
        b = elbo(params, vstate, seq, spec, Rng(5), n_mc=3)
        omega = float(np.sum(np.abs(params.W)) + np.sum(np.abs(params.U)))
        assert abs(b.penalty - lam * omega) < 1e-12
        assert abs((a.value - b.value) - lam * omega) < 1e-12

    def test_entropy_and_penalty_have_no_mc_noise(self, rng):
        params, seq, mu, ls = random_vi_instance(rng.child(3), 2, 2, 4)
        vstate = VariationalState(mode="free_form", hidden=2,
                                  mu={seq.seq_id: mu},
                                  log_sigma={seq.seq_id: ls})
        spec = PenaltySpec(kind="ridge", lam=0.3)
        a = elbo(params, vstate, seq, spec, Rng(1), n_mc=2)
        b = elbo(params, vstate, seq, spec, Rng(2), n_mc=2)
        assert a.entropy == b.entropy
        assert a.penalty == b.penalty
        assert a.emission == b.emission  # closed form, not sampled
        assert a.transition != b.transition

    def test_deterministic_params_rejected(self, rng):
        params, seq, mu, ls = random_vi_instance(rng.child(4), 1, 1, 3)
        params.state_noise = 0.0
        vstate = VariationalState(mode="free_form", hidden=1,
                                  mu={seq.seq_id: mu},
                                  log_sigma={seq.seq_id: ls})
        with pytest.raises(ValueError, match="state_noise"):
            elbo(params, vstate, seq, NONE, Rng(0))

    def test_unknown_sequence_rejected(self, rng):
        params, seq, mu, ls = random_vi_instance(rng.child(5), 1, 1, 3)
        vstate = VariationalState(mode="free_form", hidden=1,
                                  mu={"other": mu}, log_sigma={"other": ls})
        with pytest.raises(ValueError, match="s0"):
            elbo(params, vstate, seq, NONE, Rng(0))


class TestConjugateOracle:
    """Degenerate model: exact posterior and marginal known in closed form."""

    def setup_method(self):
        self.params = degenerate_params()
        y = np.array([0.3, -0.8, 1.1, 0.05])
        self.seq = Sequence(inputs=np.zeros((4, 1)), targets=y, seq_id="d0")
        self.exact = exact_degenerate_marginal(self.params, y)

    def test_closed_form_transition_is_exact_at_posterior(self):
        vstate = posterior_state(self.params, self.seq)
        est = elbo(self.params, vstate, self.seq, NONE, Rng(0),
                   transition="closed_form")
        assert abs(est.value - self.exact) < 1e-10

    def test_sampled_transition_matches_within_mc_error(self):
        vstate = posterior_state(self.params, self.seq)
        est = elbo(self.params, vstate, self.seq, NONE, Rng(0), n_mc=10_000)
        assert abs(est.value - self.exact) / abs(self.exact) < 0.01

    def test_mc_estimate_stable_across_seeds(self):
        vstate = posterior_state(self.params, self.seq)
        vals = [elbo(self.params, vstate, self.seq, NONE, Rng(k),
                     n_mc=2000).value for k in range(8)]
        spread = np.std(vals)
        assert abs(np.mean(vals) - self.exact) < 3.0 * spread + 1e-9

    def test_any_state_is_below_exact_marginal(self, rng):
        # the bound property holds for arbitrary variational parameters
        r = rng.child(10)
        for k in range(20):
            mu = r.standard_normal((4, 1))
            ls = r.standard_normal((4, 1)) - 0.5
            vstate = VariationalState(mode="free_form", hidden=1,
                                      mu={"d0": mu}, log_sigma={"d0": ls})
            est = elbo(self.params, vstate, self.seq, NONE, Rng(k),
                       transition="closed_form")
            assert est.value <= self.exact + 1e-6


class TestElboGrad:
    def test_frozen_noise_finite_difference_sweep(self, rng):
        worst = 0.0
        r = rng.child(20)
        for k in range(60):
            rr = r.child(k)
            p = int(rr.child(90).integers(1, 4))
            hid = int(rr.child(91).integers(1, 4))
            T = int(rr.child(92).integers(2, 6))
            params, seq, mu, ls = random_vi_instance(rr, p, hid, T)
            eps = rr.child(93).standard_normal((T, hid))
            vstate = VariationalState(mode="free_form", hidden=hid,
                                      mu={seq.seq_id: mu},
                                      log_sigma={seq.seq_id: ls})
            gt, (gmu, gls) = elbo_grad(params, vstate, seq, NONE, Rng(0),
                                       eps=eps)
            analytic = np.concatenate([gt, gmu.ravel(), gls.ravel()])
            vec0 = np.concatenate([params.to_vector(), mu.ravel(),
                                   ls.ravel()])
            nt = params.to_vector().size

            def f(v, params=params, seq=seq, eps=eps, nt=nt, T=T, hid=hid):
                pp = LstmParams.from_vector(v[:nt], params.n_inputs,
                                            params.hidden,
                                            state_noise=params.state_noise)
                m = v[nt:nt + T * hid].reshape(T, hid)
                l = v[nt + T * hid:].reshape(T, hid)
                return frozen_elbo_reference(pp, seq, m, l, eps)

            num = finite_diff_grad(f, vec0, step=1e-6)
            denom = np.maximum(np.abs(num), 1e-3)
            worst = max(worst, float(np.max(np.abs(analytic - num) / denom)))
        assert worst < 1e-5

    def test_entropy_slope_is_one_with_zero_noise_and_readout(self, rng):
        params, seq, mu, ls = random_vi_instance(rng.child(21), 2, 2, 4)
        params.w_y[:] = 0.0
        vstate = VariationalState(mode="free_form", hidden=2,
                                  mu={seq.seq_id: mu},
                                  log_sigma={seq.seq_id: ls})
        _, (_, gls) = elbo_grad(params, vstate, seq, NONE, Rng(0),
                                eps=np.zeros((4, 2)))
        assert np.array_equal(gls, np.ones((4, 2)))

    def test_emission_mu_grad_zero_at_zero_residual(self):
        # zero readout and targets equal to b_y: the emission part of the
        # mu gradient vanishes, leaving only the transition chain, which is
        # zero here because the sampled path sits exactly on the one-step
        # means (all-zero model, zero noise draw, mu = 0)
        params = degenerate_params(w=0.0, b_y=1.5)
        seq = Sequence(inputs=np.zeros((3, 1)),
                       targets=np.full(3, 1.5), seq_id="z")
        mu = np.zeros((3, 1))
        ls = np.full((3, 1), -0.3)
        vstate = VariationalState(mode="free_form", hidden=1,
                                  mu={"z": mu}, log_sigma={"z": ls})
        _, (gmu, _) = elbo_grad(params, vstate, seq, NONE, Rng(0),
                                eps=np.zeros((3, 1)))
        assert np.allclose(gmu, 0.0, atol=1e-14)

    def test_lasso_subgrad_included(self, rng):
        params, seq, mu, ls = random_vi_instance(rng.child(22), 2, 2, 4)
        vstate = VariationalState(mode="free_form", hidden=2,
                                  mu={seq.seq_id: mu},
                                  log_sigma={seq.seq_id: ls})
        eps = rng.child(23).standard_normal((4, 2))
        lam = 0.9
        g0, _ = elbo_grad(params, vstate, seq, NONE, Rng(0), eps=eps)
        g1, _ = elbo_grad(params, vstate, seq,
                          PenaltySpec(kind="lasso", lam=lam), Rng(0), eps=eps)
        diff = g0 - g1  # ascent orientation: penalty pulls down
        nw = params.W.size
        nu = params.U.size
        assert np.allclose(diff[:nw], lam * np.sign(params.W).ravel(),
                           atol=1e-12)
        assert np.allclose(diff[nw:nw + nu], lam * np.sign(params.U).ravel(),
                           atol=1e-12)
        assert np.allclose(diff[nw + nu:], 0.0, atol=1e-12)

    def test_amortized_state_rejected(self, rng):
        params, seq, mu, ls = random_vi_instance(rng.child(24), 1, 1, 3)
        res, vstate = fit_vi([seq], NONE,
                             TrainConfig(max_epochs=2, restarts=1), seed=0,
                             hidden=1,
                             vi=ViConfig(amortized=True, net_width=2))
        with pytest.raises(ValueError, match="amortized"):
            elbo_grad(params, vstate, seq, NONE, Rng(0))


class TestCollapsedVarianceLimit:
    def test_tiny_state_noise_recovers_plain_likelihood(self, rng):
        # mu on the deterministic hidden path, sigma_q = s: transition and
        # entropy cancel exactly, leaving the plain likelihood minus the
        # emission variance correction T * s^2 ||w_y||^2 / (2 sigma^2)
        teacher = make_teacher(2, 2, rng.child(30))
        data = make_dataset(teacher, 1, 5, rng.child(31), noise_sd=0.1)
        seq = data[0]
        s = 1e-4
        params = teacher.copy()
        params.state_noise = s

        from lstmsel.lstm import forward

        trace = forward(teacher, seq)
        mu = trace.h
        ls = np.full((5, 2), math.log(s))
        vstate = VariationalState(mode="free_form", hidden=2,
                                  mu={seq.seq_id: mu},
                                  log_sigma={seq.seq_id: ls})
        est = elbo(params, vstate, seq, NONE, Rng(0),
                   transition="closed_form")
        ll = dataset_log_likelihood(teacher, [seq])
        correction = 5 * s ** 2 * float(np.sum(params.w_y ** 2)) / (
            2.0 * params.sigma2)
        assert abs(est.value - (ll - correction)) < 1e-10
        assert abs(est.value - ll) < 1e-6


class TestFitVi:
    def test_bound_below_exact_and_gap_shrinks(self):
        params = degenerate_params()
        y = np.array([0.3, -0.8, 1.1, 0.05])
        seq = Sequence(inputs=np.zeros((4, 1)), targets=y, seq_id="d0")
        exact = exact_degenerate_marginal(params, y)
        vi = ViConfig(state_noise=params.state_noise,
                      transition="closed_form", eval_n_mc=1)
        gaps = []
        for epochs in (100, 300, 1000):
            # small step: past convergence the single-sample gradient noise
            # must stay below the remaining gap for monotonicity to show
            cfg = TrainConfig(learning_rate=0.003, max_epochs=epochs,
                              restarts=1, tol=0.0)
            res, _ = fit_vi([seq], NONE, cfg, seed=3, hidden=1, vi=vi,
                            init=params, train_theta=False)
            assert res.loglik <= exact + 1e-6
            gaps.append(exact - res.loglik)
        assert gaps[1] <= gaps[0] + 1e-9
        assert gaps[2] <= gaps[1] + 1e-9
        assert gaps[2] < 0.02

    def test_recovers_analytic_posterior(self):
        params = degenerate_params()
        y = np.array([0.3, -0.8, 1.1, 0.05])
        seq = Sequence(inputs=np.zeros((4, 1)), targets=y, seq_id="d0")
        m, v = exact_degenerate_posterior(params, y)
        vi = ViConfig(state_noise=params.state_noise, eval_n_mc=1)
        cfg = TrainConfig(learning_rate=0.002, max_epochs=9000, restarts=1,
                          tol=0.0)
        _, vstate = fit_vi([seq], NONE, cfg, seed=6, hidden=1, vi=vi,
                           init=params, train_theta=False)
        sd = math.sqrt(v)
        # 5% relative, floored at 5% of the posterior SD for near-zero means
        mu_tol = np.maximum(0.05 * np.abs(m), 0.05 * sd)
        assert np.all(np.abs(vstate.mu["d0"][:, 0] - m) < mu_tol)
        fitted_sd = np.exp(vstate.log_sigma["d0"][:, 0])
        assert np.max(np.abs(fitted_sd / sd - 1.0)) < 0.05

    def test_zero_learning_rate_keeps_parameters(self, rng):
        teacher = make_teacher(2, 2, rng.child(40))
        data = make_dataset(teacher, 2, 4, rng.child(41))
        init = init_params(2, 2, rng.child(42))
        cfg = TrainConfig(learning_rate=0.0, max_epochs=1, restarts=1)
        res, vstate = fit_vi(data, NONE, cfg, seed=0, hidden=2,
                             vi=ViConfig(eval_n_mc=4), init=init)
        expected = init.copy()
        expected.state_noise = ViConfig().state_noise
        assert np.array_equal(res.params.to_vector(), expected.to_vector())
        assert len(res.objective_trace) == 1
        assert res.loglik_kind == "elbo"

    def test_rerun_is_bit_identical(self, rng):
        teacher = make_teacher(2, 2, rng.child(43))
        data = make_dataset(teacher, 2, 4, rng.child(44))
        cfg = TrainConfig(learning_rate=0.02, max_epochs=25, restarts=2)
        vi = ViConfig(eval_n_mc=8)
        a, va = fit_vi(data, NONE, cfg, seed=7, hidden=2, vi=vi)
        b, vb = fit_vi(data, NONE, cfg, seed=7, hidden=2, vi=vi)
        assert np.array_equal(a.params.to_vector(), b.params.to_vector())
        assert a.loglik == b.loglik
        for sid in va.mu:
            assert np.array_equal(va.mu[sid], vb.mu[sid])

    def test_criteria_fields_consistent(self, rng):
        teacher = make_teacher(2, 2, rng.child(45))
        data = make_dataset(teacher, 3, 4, rng.child(46))
        cfg = TrainConfig(learning_rate=0.02, max_epochs=15, restarts=1)
        spec = PenaltySpec(kind="lasso", lam=0.05)
        res, _ = fit_vi(data, spec, cfg, seed=1, hidden=2,
                        vi=ViConfig(eval_n_mc=4))
        aic, bic = criteria_from(res.loglik, res.df, res.n_obs)
        assert res.aic == aic and res.bic == bic
        assert res.df == count_df(res.params, spec)
        assert res.df <= res.params.n_params
        assert np.all(np.isfinite(res.objective_trace))

    def test_state_returned_for_every_sequence(self, rng):
        teacher = make_teacher(2, 2, rng.child(47))
        data = make_dataset(teacher, 3, 4, rng.child(48))
        # mixed lengths exercise the grouping round trip
        data[1] = Sequence(inputs=data[1].inputs[:3],
                           targets=data[1].targets[:3], seq_id=data[1].seq_id)
        cfg = TrainConfig(learning_rate=0.02, max_epochs=5, restarts=1)
        _, vstate = fit_vi(data, NONE, cfg, seed=2, hidden=2,
                           vi=ViConfig(eval_n_mc=2))
        for seq in data:
            assert vstate.mu[seq.seq_id].shape == (seq.length, 2)
            assert vstate.log_sigma[seq.seq_id].shape == (seq.length, 2)

    def test_amortized_mode_runs_and_is_deterministic(self, rng):
        teacher = make_teacher(2, 2, rng.child(49))
        data = make_dataset(teacher, 2, 5, rng.child(50))
        cfg = TrainConfig(learning_rate=0.02, max_epochs=10, restarts=1)
        vi = ViConfig(amortized=True, net_width=4, eval_n_mc=4)
        a, va = fit_vi(data, NONE, cfg, seed=5, hidden=2, vi=vi)
        b, vb = fit_vi(data, NONE, cfg, seed=5, hidden=2, vi=vi)
        assert va.mode == "amortized" and va.net is not None
        assert a.loglik == b.loglik
        assert np.array_equal(va.net.to_vector(), vb.net.to_vector())
        est = elbo(a.params, va, data[0], NONE, Rng(0), n_mc=2)
        assert np.isfinite(est.value)

    def test_duplicate_ids_rejected(self, rng):
        teacher = make_teacher(1, 1, rng.child(51))
        data = make_dataset(teacher, 2, 3, rng.child(52))
        data[1] = Sequence(inputs=data[1].inputs, targets=data[1].targets,
                           seq_id=data[0].seq_id)
        with pytest.raises(ValueError, match="unique"):
            fit_vi(data, NONE, TrainConfig(max_epochs=1, restarts=1),
                   seed=0, hidden=1)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            fit_vi([], NONE, TrainConfig(), seed=0, hidden=1)

    def test_all_restarts_failing_raises(self, rng):
        teacher = make_teacher(1, 1, rng.child(53))
        data = make_dataset(teacher, 2, 3, rng.child(54))
        cfg = TrainConfig(learning_rate=1e9, max_epochs=4, restarts=2,
                          clip_norm=1e30)
        with pytest.raises(FitError, match="restart"):
            fit_vi(data, NONE, cfg, seed=0, hidden=1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ViConfig(n_mc=0)
        with pytest.raises(ValueError):
            ViConfig(eval_n_mc=0)
        with pytest.raises(ValueError):
            ViConfig(state_noise=0.0)
        with pytest.raises(ValueError):
            ViConfig(state_noise=float("nan"))
        with pytest.raises(ValueError):
            ViConfig(transition="mean")
        with pytest.raises(ValueError):
            ViConfig(net_width=0)
        with pytest.raises(ValueError):
            VariationalState(mode="banana", hidden=1)
        with pytest.raises(ValueError):
            VariationalState(mode="amortized", hidden=1)
