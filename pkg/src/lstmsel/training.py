"""Penalized maximum-likelihood training of the deterministic network.

Adam on the smooth part of the objective (negative log-likelihood plus any
differentiable penalty), a proximal step after each update for the l1 and
group families so zeros are exact, global gradient clipping, multiple
restarts, and relative-change convergence control.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lstm import (
    LstmParams,
    ParamLayout,
    Sequence,
    _batch_backward_nll,
    _batch_forward,
    _batch_nll,
    dataset_log_likelihood,
    group_by_length,
    init_params,
    total_steps,
)
from .numerics import Rng
from .penalties import (
    PenaltySpec,
    count_df,
    penalty_subgrad,
    penalty_value,
    prox_vector,
    smooth_penalty_grad,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class FitError(RuntimeError):
    """Every restart of a fit failed."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and convergence settings."""

    learning_rate: float = 0.01
    max_epochs: int = 500
    clip_norm: float = 5.0
    restarts: int = 3
    tol: float = 1e-6
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0.0):
            raise ValueError("learning_rate must be finite and non-negative")
        if self.max_epochs < 1 or self.restarts < 1 or self.patience < 1:
            raise ValueError("max_epochs, restarts, patience must be >= 1")
        if not (np.isfinite(self.clip_norm) and self.clip_norm > 0.0):
            raise ValueError("clip_norm must be positive")
        if not (np.isfinite(self.tol) and self.tol >= 0.0):
            raise ValueError("tol must be finite and non-negative")


@dataclass(eq=False)
class FitResult:
    """Outcome of one training run (best restart)."""

    params: LstmParams
    objective_trace: np.ndarray
    loglik: float
    df: int
    aic: float
    bic: float
    n_obs: int
    seed: int
    epochs: int
    converged: bool
    loglik_kind: str = "exact"
    extra: dict = field(default_factory=dict)


def criteria_from(ll: float, df: int, n_obs: int) -> tuple[float, float]:
    """(AIC, BIC) from a log-likelihood, df, and pooled observation count."""
    return -2.0 * ll + 2.0 * df, -2.0 * ll + np.log(n_obs) * df


class _Adam:
    """Adam state over a flat parameter vector."""

    def __init__(self, size: int, lr: float):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.lr = lr

    def step(self, vec: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = ADAM_BETA1 * self.m + (1.0 - ADAM_BETA1) * grad
        self.v = ADAM_BETA2 * self.v + (1.0 - ADAM_BETA2) * grad * grad
        mhat = self.m / (1.0 - ADAM_BETA1 ** self.t)
        vhat = self.v / (1.0 - ADAM_BETA2 ** self.t)
        vec -= self.lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def clip_gradient(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def _objective_and_grad_vec(groups, vec, lay: ParamLayout, spec: PenaltySpec,
                            mask_rng: Rng | None = None):
    """Penalized objective and its smooth-part gradient on the flat vector.

    The l1-family penalty values are included in the objective (for honest
    traces) but their gradients are left to the proximal step.
    """
    params = LstmParams.from_vector(vec, lay.n_inputs, lay.hidden)
    total = 0.0
    grad = np.zeros(lay.size)
    coef_h = spec.lam_hidden * spec.beta
    for X, Y, _ in groups:
        mask = None
        if spec.dropout_p > 0.0 and mask_rng is not None:
            keep = (mask_rng.uniform(size=(X.shape[0], X.shape[1], lay.hidden))
                    >= spec.dropout_p)
            mask = keep / (1.0 - spec.dropout_p)
        trace = _batch_forward(params, X, mask)
        total += _batch_nll(params, trace, Y)
        dh_extra = None
        if coef_h > 0.0:
            total += coef_h * float(np.sum(np.abs(trace.H)))
            dh_extra = coef_h * np.sign(trace.H)
        g, _ = _batch_backward_nll(params, X, Y, trace, dh_extra)
        grad += g.to_vector()
    total += spec.lam * penalty_value(spec, params)
    grad += spec.lam * smooth_penalty_grad(spec, params)
    return total, grad


def objective_and_grad(dataset: list[Sequence], params: LstmParams,
                       spec: PenaltySpec):
    """Full penalized objective and a (sub)gradient at the given parameters.

    Unlike the training loop, the gradient here includes subgradients of the
    nonsmooth penalty parts (sign taken as 0 at 0), so lam=0 reduces to the
    negative log-likelihood and its BPTT gradient.
    """
    groups = group_by_length(dataset)
    lay = ParamLayout(params.n_inputs, params.hidden)
    vec = params.to_vector()
    total, grad = _objective_and_grad_vec(groups, vec, lay, spec)
    if spec.kind not in ("none", "ridge"):
        grad = grad + spec.lam * penalty_subgrad(spec, params)
    return total, grad


class _RestartFailed(RuntimeError):
    pass


def _fit_once(groups, params0: LstmParams, spec: PenaltySpec, cfg: TrainConfig,
              mask_rng: Rng):
    lay = ParamLayout(params0.n_inputs, params0.hidden)
    vec = params0.to_vector()
    adam = _Adam(lay.size, cfg.learning_rate)
    trace = []
    best_obj = np.inf
    best_vec = vec.copy()
    calm = 0
    converged = False
    for _ in range(cfg.max_epochs):
        try:
            obj, grad = _objective_and_grad_vec(groups, vec, lay, spec,
                                                mask_rng)
        except ValueError as exc:
            # exploded parameters fail the params constructor; treat the
            # restart as diverged rather than crashing the whole fit
            raise _RestartFailed(str(exc)) from exc
        if not np.isfinite(obj) or not np.all(np.isfinite(grad)):
            raise _RestartFailed("non-finite objective or gradient")
        trace.append(obj)
        if obj < best_obj:
            best_obj = obj
            best_vec = vec.copy()
        if len(trace) >= 2:
            rel = abs(trace[-1] - trace[-2]) / max(1.0, abs(trace[-2]))
            calm = calm + 1 if rel < cfg.tol else 0
            if calm >= cfg.patience:
                converged = True
                break
        grad = clip_gradient(grad, cfg.clip_norm)
        adam.step(vec, grad)
        prox_vector(spec, vec, lay, adam.lr)
    try:
        final_obj, _ = _objective_and_grad_vec(groups, vec, lay, spec)
    except ValueError:
        final_obj = np.inf  # last step diverged; keep the best iterate
    if np.isfinite(final_obj) and final_obj < best_obj:
        best_obj = final_obj
        best_vec = vec
    return best_vec, best_obj, np.asarray(trace), converged


def fit(dataset: list[Sequence], seed: int, spec: PenaltySpec,
        cfg: TrainConfig, hidden: int, init: LstmParams | None = None,
        restarts: int | None = None) -> FitResult:
    """Fit the deterministic network by penalized maximum likelihood.

    Runs cfg.restarts independent seeded initializations (or warm-starts
    from `init`, in which case every restart shares it) and returns the best
    final penalized objective. The fitted noise variance is trained jointly
    on the log scale.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    groups = group_by_length(dataset)
    n_inputs = dataset[0].n_inputs
    n_obs = total_steps(dataset)
    n_restarts = cfg.restarts if restarts is None else restarts
    best = None
    failures = []
    epochs_run = 0
    converged = False
    for r in range(n_restarts):
        rng = Rng(seed).child(r)
        params0 = init.copy() if init is not None else init_params(
            n_inputs, hidden, rng)
        try:
            vec, obj, trace, conv = _fit_once(groups, params0, spec, cfg, rng)
        except _RestartFailed as exc:
            failures.append(f"restart {r}: {exc}")
            continue
        if best is None or obj < best[1]:
            best = (vec, obj, trace)
            epochs_run = len(trace)
            converged = conv
    if best is None:
        raise FitError("all restarts failed: " + "; ".join(failures))
    params = LstmParams.from_vector(best[0], n_inputs, hidden)
    ll = dataset_log_likelihood(params, dataset)
    df = count_df(params, spec)
    aic, bic = criteria_from(ll, df, n_obs)
    return FitResult(
        params=params,
        objective_trace=best[2],
        loglik=ll,
        df=df,
        aic=aic,
        bic=bic,
        n_obs=n_obs,
        seed=seed,
        epochs=epochs_run,
        converged=converged,
        loglik_kind="exact",
        extra={"n_failed_restarts": len(failures)},
    )


def validation_rmse(params: LstmParams, seqs: list[Sequence]) -> float:
    """Pooled RMSE of the deterministic predictions over a dataset."""
    sse = 0.0
    count = 0
    for X, Y, _ in group_by_length(seqs):
        trace = _batch_forward(params, X)
        sse += float(np.sum((trace.y_hat - Y) ** 2))
        count += Y.size
    return float(np.sqrt(sse / count))


def select_lambda(dataset: list[Sequence], lambdas, seed: int,
                  spec: PenaltySpec, cfg: TrainConfig, hidden: int,
                  method: str = "bic"):
    """Grid selection of the penalty strength.

    method "bic" scores each fit by its BIC on the full dataset; method
    "rmse" holds out the last 20% of sequences (chronological split, never
    shuffled within a sequence) and scores by validation RMSE. Returns
    (best lambda, list of (lambda, score) in grid order).
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise ValueError("lambda grid must be nonempty")
    if method not in ("bic", "rmse"):
        raise ValueError("method must be 'bic' or 'rmse'")
    if method == "rmse":
        cut = max(1, int(round(len(dataset) * 0.8)))
        if cut == len(dataset):
            cut = len(dataset) - 1
        if cut < 1:
            raise ValueError("dataset too small for a validation split")
        train, val = dataset[:cut], dataset[cut:]
    scores = []
    for lam in lambdas:
        spec_l = PenaltySpec(
            kind=spec.kind, lam=float(lam), alpha1=spec.alpha1,
            alpha2=spec.alpha2, alpha3=spec.alpha3, beta=spec.beta,
            lam_hidden=spec.lam_hidden, dropout_p=spec.dropout_p,
            zero_tol=spec.zero_tol,
        )
        if method == "bic":
            res = fit(dataset, seed, spec_l, cfg, hidden)
            scores.append((float(lam), res.bic))
        else:
            res = fit(train, seed, spec_l, cfg, hidden)
            scores.append((float(lam), validation_rmse(res.params, val)))
    best_lam = min(scores, key=lambda s: s[1])[0]
    return best_lam, scores
