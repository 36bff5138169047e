"""Adaptive Gauss-Hermite marginal likelihood for the stochastic model.

Each observation contributes a one-dimensional integral: conditionally on
the filtered previous state, the hidden state enters the emission only
through the scalar projection u = w_y . h, whose prior is Gaussian with
mean w_y . (one-step mean) and variance s^2 ||w_y||^2. The integrand mode
is located by Newton iteration, the curvature sets the quadrature scale,
and the K-point Gauss-Hermite sum integrates the exact integrand. The
filtered state is the posterior-mode plug-in; the cell memory chain is
propagated deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .lstm import (
    CellState,
    LstmParams,
    ParamLayout,
    Sequence,
    cell_step,
    group_by_length,
    init_params,
    total_steps,
)
from .numerics import EvaluationError, Rng, gauss_hermite_rule, logsumexp
from .penalties import count_df, penalty_value, prox_vector, PenaltySpec
from .training import (
    FitError,
    FitResult,
    TrainConfig,
    _Adam,
    clip_gradient,
    criteria_from,
)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class AghqConfig:
    """Quadrature order, Newton controls, and the shared state-noise scale."""

    k: int = 9
    newton_max: int = 25
    newton_tol: float = 1e-10
    state_noise: float = 0.1
    refit_epochs: int = 0

    def __post_init__(self):
        if not 1 <= self.k <= 64:
            raise ValueError("quadrature order k must be in 1..64")
        if self.newton_max < 1:
            raise ValueError("newton_max must be >= 1")
        if self.newton_tol <= 0.0:
            raise ValueError("newton_tol must be positive")
        if not (np.isfinite(self.state_noise) and self.state_noise > 0.0):
            raise ValueError("state_noise must be positive")
        if self.refit_epochs < 0:
            raise ValueError("refit_epochs must be >= 0")


@dataclass
class StepMarginal:
    """One filtering step: mode state, curvature scale, and log marginal."""

    t: int
    mode: np.ndarray
    scale: float
    logmarg: float
    u_mode: float = 0.0


def _require_noise(params: LstmParams):
    if params.state_noise <= 0.0:
        raise ValueError("marginal likelihood requires state_noise > 0")


def step_marginal(params: LstmParams, h_tilde: np.ndarray, y: float,
                  cfg: AghqConfig = AghqConfig(), t: int = 0,
                  exact: bool = False) -> StepMarginal:
    """Marginal contribution of one observation given the one-step mean.

    h_tilde is the deterministic cell output for this step; the hidden
    state is h_tilde + s * eta. Newton iteration locates the mode of the
    log integrand in the scalar u = w_y . h; the adaptive K-point rule (or
    the exact Gaussian convolution when exact=True) integrates it. When
    w_y is all zero the observation is independent of the state and the
    mode state equals h_tilde.
    """
    _require_noise(params)
    h_tilde = np.asarray(h_tilde, dtype=np.float64)
    if h_tilde.shape != (params.hidden,):
        raise ValueError("h_tilde must have shape (hidden,)")
    wy = params.w_y
    sigma2 = params.sigma2
    by = params.b_y
    wnorm2 = float(wy @ wy)
    if wnorm2 == 0.0:
        lm = float(-0.5 * (LOG_2PI + np.log(sigma2))
                   - (y - by) ** 2 / (2.0 * sigma2))
        return StepMarginal(t=t, mode=h_tilde.copy(), scale=0.0,
                            logmarg=lm, u_mode=0.0)
    m_u = float(wy @ h_tilde)
    v_u = params.state_noise ** 2 * wnorm2

    # Newton on g(u) = log N(y; u+by, sigma2) + log N(u; m_u, v_u)
    u = m_u
    gpp = -1.0 / sigma2 - 1.0 / v_u
    for _ in range(cfg.newton_max):
        gp = (y - by - u) / sigma2 - (u - m_u) / v_u
        if abs(gp) < cfg.newton_tol:
            break
        u = u - gp / gpp
    scale = 1.0 / np.sqrt(-gpp)

    if exact:
        vtot = sigma2 + v_u
        lm = float(-0.5 * (LOG_2PI + np.log(vtot))
                   - (y - by - m_u) ** 2 / (2.0 * vtot))
    else:
        rule = gauss_hermite_rule(cfg.k)
        uk = u + np.sqrt(2.0) * scale * rule.nodes
        # extreme observations overflow the quadratic terms; the resulting
        # non-finite sum is reported as an EvaluationError below
        with np.errstate(over="ignore"):
            li = (-0.5 * (LOG_2PI + np.log(sigma2))
                  - (y - by - uk) ** 2 / (2.0 * sigma2)
                  - 0.5 * (LOG_2PI + np.log(v_u))
                  - (uk - m_u) ** 2 / (2.0 * v_u))
        lm = float(logsumexp(np.log(rule.weights) + rule.nodes ** 2 + li)
                   + np.log(np.sqrt(2.0) * scale))
    mode = h_tilde + wy * ((u - m_u) / wnorm2)
    if not np.isfinite(lm):
        raise EvaluationError("non-finite step marginal", coordinate=t)
    return StepMarginal(t=t, mode=mode, scale=float(scale), logmarg=lm,
                        u_mode=float(u))


def sequence_marginal(params: LstmParams, seq: Sequence,
                      cfg: AghqConfig = AghqConfig(),
                      exact: bool = False):
    """Filtered marginal log-likelihood of one sequence.

    Runs the deterministic cell on the plug-in mode states, calling
    step_marginal at each observation. Returns (total, list of
    StepMarginal). Raises EvaluationError with the failing step index if
    any contribution is non-finite.
    """
    _require_noise(params)
    if seq.n_inputs != params.n_inputs:
        raise ValueError("sequence input width does not match the model")
    state = CellState.zeros(params.hidden)
    steps = []
    total = 0.0
    for t in range(seq.length):
        det, _ = cell_step(params, state, seq.inputs[t])
        sm = step_marginal(params, det.h, float(seq.targets[t]), cfg,
                           t=t, exact=exact)
        steps.append(sm)
        total += sm.logmarg
        state = CellState(h=sm.mode, c=det.c)
    return float(total), steps


def dataset_marginal(params: LstmParams, dataset: list[Sequence],
                     cfg: AghqConfig = AghqConfig(),
                     exact: bool = False) -> float:
    """Total filtered marginal log-likelihood over a dataset (fast path)."""
    _require_noise(params)
    if not dataset:
        raise ValueError("dataset must be nonempty")
    rule = gauss_hermite_rule(cfg.k)
    logw = np.log(rule.weights)
    hid = params.hidden
    W4 = params.W.reshape(4 * hid, params.n_inputs)
    U4T = np.ascontiguousarray(params.U.reshape(4 * hid, hid).T)
    b4 = params.b.reshape(4 * hid)
    total = 0.0
    for X, Y, _ in group_by_length(dataset):
        Zx = X @ W4.T + b4
        logmarg, _, _, _, _ = _kernels.aghq_filter_scan(
            Zx, U4T, params.w_y, params.b_y, params.sigma2,
            params.state_noise, Y, rule.nodes, logw, not exact)
        if not np.all(np.isfinite(logmarg)):
            bad = int(np.flatnonzero(~np.isfinite(logmarg))[0])
            raise EvaluationError("non-finite sequence marginal",
                                  coordinate=bad)
        total += float(np.sum(logmarg))
    return total


def fit_aghq(dataset: list[Sequence], spec: PenaltySpec, cfg: TrainConfig,
             seed: int, hidden: int, aghq: AghqConfig = AghqConfig(),
             init: LstmParams | None = None,
             free_mask: np.ndarray | None = None,
             epochs: int | None = None,
             restarts: int | None = None) -> FitResult:
    """Penalized marginal-likelihood training by finite-difference Adam.

    The objective is -dataset_marginal + lam * Omega(theta); gradients are
    central differences over the free coordinates (all by default, or the
    True entries of free_mask). epochs=0 evaluates and returns the
    initialization unchanged. Slow by design: meant for small models and
    for refining estimates obtained by other routes.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    n_inputs = dataset[0].n_inputs
    lay = ParamLayout(n_inputs, hidden)
    if free_mask is not None:
        free_mask = np.asarray(free_mask, dtype=bool)
        if free_mask.shape != (lay.size,):
            raise ValueError("free_mask must match the parameter vector")
    n_obs = total_steps(dataset)
    n_epochs = cfg.max_epochs if epochs is None else epochs
    if n_epochs < 0:
        raise ValueError("epochs must be >= 0")
    n_restarts = cfg.restarts if restarts is None else restarts

    def objective(vec):
        p = LstmParams.from_vector(vec, n_inputs, hidden,
                                   state_noise=aghq.state_noise)
        return (-dataset_marginal(p, dataset, aghq)
                + spec.lam * penalty_value(spec, p))

    step_h = 1e-5
    best = None
    failures = []
    for r in range(max(1, n_restarts)):
        rng = Rng(seed).child(r)
        if init is not None:
            params0 = init.copy()
            params0.state_noise = aghq.state_noise
        else:
            params0 = init_params(n_inputs, hidden, rng,
                                  state_noise=aghq.state_noise)
        vec = params0.to_vector()
        frozen = vec.copy()
        adam = _Adam(lay.size, cfg.learning_rate)
        trace = [objective(vec)]
        calm = 0
        converged = False
        ok = True
        ep = 0
        for ep in range(n_epochs):
            grad = np.zeros(lay.size)
            idx = (np.flatnonzero(free_mask) if free_mask is not None
                   else range(lay.size))
            for i in idx:
                keep = vec[i]
                vec[i] = keep + step_h
                hi = objective(vec)
                vec[i] = keep - step_h
                lo = objective(vec)
                vec[i] = keep
                grad[i] = (hi - lo) / (2.0 * step_h)
            grad = clip_gradient(grad, cfg.clip_norm)
            adam.step(vec, grad)
            prox_vector(spec, vec, lay, adam.lr)
            # restore after the prox so frozen coordinates never move
            if free_mask is not None:
                vec[~free_mask] = frozen[~free_mask]
            obj = objective(vec)
            if not np.isfinite(obj):
                ok = False
                failures.append(f"restart {r}: non-finite objective")
                break
            trace.append(obj)
            rel = abs(trace[-1] - trace[-2]) / max(1.0, abs(trace[-2]))
            calm = calm + 1 if rel < cfg.tol else 0
            if calm >= cfg.patience:
                converged = True
                break
        if not ok:
            continue
        if best is None or trace[-1] < best[1]:
            best = (vec.copy(), trace[-1], trace, ep + 1 if n_epochs else 0,
                    converged)
        if init is not None:
            break
    if best is None:
        raise FitError("all restarts failed: " + "; ".join(failures))
    vec, _, trace, ran, converged = best
    params = LstmParams.from_vector(vec, n_inputs, hidden,
                                    state_noise=aghq.state_noise)
    ll = dataset_marginal(params, dataset, aghq)
    df = count_df(params, spec)
    aic, bic = criteria_from(ll, df, n_obs)
    return FitResult(
        params=params, objective_trace=np.asarray(trace), loglik=ll,
        df=df, aic=aic, bic=bic, n_obs=n_obs, seed=seed, epochs=ran,
        converged=converged, loglik_kind="aghq",
        extra={"n_failed_restarts": len(failures)},
    )


def rescore(fit: FitResult, dataset: list[Sequence],
            aghq: AghqConfig = AghqConfig()) -> FitResult:
    """Replace a FitResult's likelihood by the AGHQ marginal of its
    parameters and recompute the information criteria."""
    params = fit.params.copy()
    params.state_noise = aghq.state_noise
    ll = dataset_marginal(params, dataset, aghq)
    aic, bic = criteria_from(ll, fit.df, fit.n_obs)
    return FitResult(
        params=params, objective_trace=fit.objective_trace, loglik=ll,
        df=fit.df, aic=aic, bic=bic, n_obs=fit.n_obs, seed=fit.seed,
        epochs=fit.epochs, converged=fit.converged, loglik_kind="aghq",
        extra=dict(fit.extra),
    )
