"""Model selection over hidden-state size and active inputs.

Candidates are (hidden size q, input mask, penalty, estimator) tuples,
scored by temporal information criteria computed from the estimator's
likelihood value, or by out-of-sample RMSE on a held-out sequence split.
The stepwise driver searches hidden size first, then prunes inputs by
backward elimination, then fine-tunes the surviving model.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .aghq import AghqConfig, fit_aghq, rescore
from .lstm import LstmParams, Sequence, total_steps
from .numerics import EvaluationError, Rng
from .penalties import PenaltySpec
from .training import FitError, FitResult, TrainConfig, criteria_from, fit, validation_rmse
from .variational import ViConfig, fit_vi

ESTIMATORS = ("pmle", "vi", "aghq")
CRITERIA = ("aic", "bic", "oos")

_OOS_STREAM = 77_003


class SelectionError(RuntimeError):
    pass


def information_criteria(loglik: float, df: int, n_obs: int):
    """(AIC, BIC) from a likelihood value, parameter count, and the pooled
    number of scalar observations."""
    return criteria_from(loglik, df, n_obs)


@dataclass(frozen=True)
class CandidateModel:
    """One point of the search space."""

    q: int
    input_mask: tuple
    penalty: PenaltySpec
    estimator: str = "pmle"

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("hidden size q must be >= 1")
        mask = tuple(bool(b) for b in self.input_mask)
        object.__setattr__(self, "input_mask", mask)
        if not any(mask):
            raise ValueError("candidate must keep at least one input")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")

    @property
    def n_active(self) -> int:
        return sum(self.input_mask)

    def active_indices(self) -> list:
        return [i for i, b in enumerate(self.input_mask) if b]


@dataclass(eq=False)
class ScoredModel:
    candidate: CandidateModel
    fit: FitResult
    aic: float
    bic: float
    validation_rmse: float | None = None


@dataclass(eq=False)
class StageReport:
    name: str
    table: list
    chosen: int
    wall_clock_s: float = 0.0
    failures: list = field(default_factory=list)


@dataclass(eq=False)
class SelectionReport:
    stages: list
    final: ScoredModel
    selected_inputs: list
    chosen_q: int
    criterion: str
    seed: int
    n_obs: int
    degenerate_noise: bool
    wall_clock_s: float = 0.0


@dataclass(frozen=True)
class PipelineConfig:
    """Shared settings for candidate fitting and the stepwise driver."""

    estimator: str = "pmle"
    penalty: PenaltySpec = PenaltySpec()
    train: TrainConfig = TrainConfig()
    vi: ViConfig = ViConfig()
    aghq: AghqConfig = AghqConfig()
    oos_fraction: float = 0.2
    fine_tune_epoch_factor: int = 4
    fine_tune_lr_div: float = 10.0

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if not 0.0 < self.oos_fraction < 1.0:
            raise ValueError("oos_fraction must be in (0, 1)")
        if self.fine_tune_epoch_factor < 1 or self.fine_tune_lr_div < 1.0:
            raise ValueError("fine-tune settings must be >= 1")


def candidate_seed(seed: int, cand: CandidateModel) -> int:
    """Content-addressed seed: identical candidates always fit identically
    within one selection run, regardless of evaluation order."""
    p = cand.penalty
    key = "|".join([
        str(seed), str(cand.q),
        "".join("1" if b else "0" for b in cand.input_mask),
        cand.estimator, p.kind,
        repr((p.lam, p.alpha1, p.alpha2, p.alpha3, p.beta,
              p.lam_hidden, p.dropout_p, p.zero_tol)),
    ])
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def _mask_columns(dataset, mask):
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    return [Sequence(s.inputs[:, idx], s.targets, seq_id=s.seq_id)
            for s in dataset]


def _fit_candidate(dataset, cand: CandidateModel, cfg: PipelineConfig,
                   seed: int, init: LstmParams | None = None,
                   train_cfg: TrainConfig | None = None) -> FitResult:
    sub = _mask_columns(dataset, cand.input_mask)
    tc = cfg.train if train_cfg is None else train_cfg
    restarts = 1 if init is not None else None
    if cand.estimator == "pmle":
        return fit(sub, seed, cand.penalty, tc, hidden=cand.q,
                   init=init, restarts=restarts)
    if cand.estimator == "vi":
        res, _ = fit_vi(sub, cand.penalty, tc, seed, cand.q, cfg.vi,
                        init=init, restarts=restarts)
        return res
    # aghq: variational fit, then marginal-likelihood rescoring, with an
    # optional short finite-difference refinement of the marginal itself
    res, _ = fit_vi(sub, cand.penalty, tc, seed, cand.q, cfg.vi,
                    init=init, restarts=restarts)
    if cfg.aghq.refit_epochs > 0:
        return fit_aghq(sub, cand.penalty, tc, seed, cand.q, cfg.aghq,
                        init=res.params, epochs=cfg.aghq.refit_epochs,
                        restarts=1)
    return rescore(res, sub, cfg.aghq)


def _score(dataset, cand, cfg, seed, val_set=None, init=None,
           train_cfg=None) -> ScoredModel:
    res = _fit_candidate(dataset, cand, cfg, seed, init=init,
                         train_cfg=train_cfg)
    rmse = None
    if val_set is not None:
        rmse = validation_rmse(res.params, _mask_columns(val_set,
                                                         cand.input_mask))
    return ScoredModel(candidate=cand, fit=res, aic=res.aic, bic=res.bic,
                       validation_rmse=rmse)


def _crit(sm: ScoredModel, criterion: str) -> float:
    if criterion == "aic":
        return sm.aic
    if criterion == "bic":
        return sm.bic
    if criterion == "oos":
        if sm.validation_rmse is None:
            raise SelectionError("oos criterion requires a validation split")
        return sm.validation_rmse
    raise ValueError(f"unknown criterion {criterion!r}")


def _sort_key(sm: ScoredModel, criterion: str):
    # ties break toward fewer effective parameters, then smaller hidden
    # size, then the lexicographically smallest input mask
    return (_crit(sm, criterion), sm.fit.df, sm.candidate.q,
            tuple(int(b) for b in sm.candidate.input_mask))


def _pick(table, criterion):
    best = None
    best_key = None
    for i, sm in enumerate(table):
        key = _sort_key(sm, criterion)
        if best is None or key < best_key:
            best, best_key = i, key
    return best


def split_oos(dataset, fraction: float, seed: int):
    """Deterministic whole-sequence split into (fit part, held-out part)."""
    n = len(dataset)
    if n < 2:
        raise SelectionError("oos criterion needs at least two sequences")
    rng = Rng(seed).child(_OOS_STREAM)
    perm = rng.permutation(n)
    n_val = min(n - 1, max(1, int(round(fraction * n))))
    val_idx = sorted(int(i) for i in perm[:n_val])
    fit_idx = sorted(int(i) for i in perm[n_val:])
    return [dataset[i] for i in fit_idx], [dataset[i] for i in val_idx]


def select_model(dataset, candidates, criterion: str, cfg: PipelineConfig,
                 seed: int) -> SelectionReport:
    """Score an explicit candidate list and pick the criterion minimizer."""
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    if not candidates:
        raise SelectionError("no candidates supplied")
    t0 = time.perf_counter()
    fit_part, val_part = (split_oos(dataset, cfg.oos_fraction, seed)
                          if criterion == "oos" else (dataset, None))
    table = []
    failures = []
    for cand in candidates:
        try:
            table.append(_score(fit_part, cand, cfg, candidate_seed(seed, cand),
                                val_set=val_part))
        except (FitError, EvaluationError) as exc:
            failures.append((cand, str(exc)))
    if not table:
        raise SelectionError(
            "all candidates failed: "
            + "; ".join(msg for _, msg in failures))
    chosen = _pick(table, criterion)
    stage = StageReport(name="grid", table=table, chosen=chosen,
                        wall_clock_s=time.perf_counter() - t0,
                        failures=[(c.q, c.active_indices(), m)
                                  for c, m in failures])
    return _finish_report([stage], table[chosen], criterion, seed,
                          total_steps(dataset), time.perf_counter() - t0)


def _finish_report(stages, final: ScoredModel, criterion, seed, n_obs,
                   wall) -> SelectionReport:
    params = final.fit.params
    tol = final.candidate.penalty.zero_tol
    degenerate = bool(np.all(np.abs(params.W) <= tol)
                      and np.all(np.abs(params.U) <= tol))
    return SelectionReport(
        stages=stages,
        final=final,
        selected_inputs=[i + 1 for i in final.candidate.active_indices()],
        chosen_q=final.candidate.q,
        criterion=criterion,
        seed=seed,
        n_obs=n_obs,
        degenerate_noise=degenerate,
        wall_clock_s=wall,
    )


def stepwise_hif(dataset, q_grid, criterion: str, cfg: PipelineConfig,
                 seed: int) -> SelectionReport:
    """Three-stage search: hidden size, input pruning, fine-tuning.

    Stage one fits every hidden size in q_grid with all inputs and keeps
    the criterion minimizer. Stage two repeatedly removes the single input
    whose removal most improves the criterion, refitting each candidate
    from scratch, and stops when no removal improves it (or one input is
    left). Stage three refits the survivor from its own parameters with
    more epochs and a smaller step, keeping the better of the two.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    q_grid = sorted(set(int(q) for q in q_grid))
    if not q_grid:
        raise SelectionError("q_grid must be nonempty")
    if not dataset:
        raise SelectionError("dataset must be nonempty")
    p = dataset[0].n_inputs
    full_mask = tuple([True] * p)
    t_start = time.perf_counter()
    fit_part, val_part = (split_oos(dataset, cfg.oos_fraction, seed)
                          if criterion == "oos" else (dataset, None))

    def try_score(cand, init=None, train_cfg=None):
        try:
            return _score(fit_part, cand, cfg, candidate_seed(seed, cand),
                          val_set=val_part, init=init, train_cfg=train_cfg)
        except (FitError, EvaluationError) as exc:
            fails.append((cand.q, cand.active_indices(), str(exc)))
            return None

    # Stage H: hidden-state size on the full input set
    t0 = time.perf_counter()
    fails = []
    table_h = []
    for q in q_grid:
        sm = try_score(CandidateModel(q, full_mask, cfg.penalty,
                                      cfg.estimator))
        if sm is not None:
            table_h.append(sm)
    if not table_h:
        raise SelectionError("stage H: all hidden-size candidates failed")
    chosen_h = _pick(table_h, criterion)
    stage_h = StageReport(name="hidden", table=table_h, chosen=chosen_h,
                          wall_clock_s=time.perf_counter() - t0,
                          failures=fails)
    incumbent = table_h[chosen_h]

    # Stage I: backward elimination of inputs
    t0 = time.perf_counter()
    fails = []
    table_i = [incumbent]
    chosen_i = 0
    while incumbent.candidate.n_active > 1:
        best_drop = None
        best_idx = -1
        for j in incumbent.candidate.active_indices():
            mask = list(incumbent.candidate.input_mask)
            mask[j] = False
            cand = CandidateModel(incumbent.candidate.q, tuple(mask),
                                  cfg.penalty, cfg.estimator)
            sm = try_score(cand)
            if sm is None:
                continue
            table_i.append(sm)
            if best_drop is None or (_sort_key(sm, criterion)
                                     < _sort_key(best_drop, criterion)):
                best_drop = sm
                best_idx = len(table_i) - 1
        if best_drop is None:
            break
        if _crit(best_drop, criterion) < _crit(incumbent, criterion):
            incumbent = best_drop
            chosen_i = best_idx
        else:
            break
    stage_i = StageReport(name="inputs", table=table_i, chosen=chosen_i,
                          wall_clock_s=time.perf_counter() - t0,
                          failures=fails)

    # Stage F: fine-tune the survivor from its own parameters
    t0 = time.perf_counter()
    fails = []
    tuned_cfg = replace(
        cfg.train,
        max_epochs=cfg.train.max_epochs * cfg.fine_tune_epoch_factor,
        learning_rate=cfg.train.learning_rate / cfg.fine_tune_lr_div,
    )
    table_f = [incumbent]
    tuned = try_score(incumbent.candidate, init=incumbent.fit.params,
                      train_cfg=tuned_cfg)
    if tuned is not None:
        table_f.append(tuned)
    chosen_f = _pick(table_f, criterion)
    stage_f = StageReport(name="fine_tune", table=table_f, chosen=chosen_f,
                          wall_clock_s=time.perf_counter() - t0,
                          failures=fails)
    final = table_f[chosen_f]
    return _finish_report([stage_h, stage_i, stage_f], final, criterion,
                          seed, total_steps(dataset),
                          time.perf_counter() - t_start)


def exhaustive_search(dataset, q_grid, criterion: str, cfg: PipelineConfig,
                      seed: int, allow_large: bool = False) -> SelectionReport:
    """Every nonempty input subset crossed with every hidden size.

    Exponential in the input count; refuses more than 12 inputs unless
    allow_large is set.
    """
    p = dataset[0].n_inputs
    if p > 12 and not allow_large:
        raise SelectionError(
            f"exhaustive search over {p} inputs needs allow_large=True")
    cands = []
    for q in sorted(set(int(v) for v in q_grid)):
        for bits in range(1, 1 << p):
            mask = tuple(bool(bits >> i & 1) for i in range(p))
            cands.append(CandidateModel(q, mask, cfg.penalty, cfg.estimator))
    return select_model(dataset, cands, criterion, cfg, seed)


def bic_curve(report: SelectionReport):
    """Rows (n_active_inputs, q, bic) for every scored candidate, in stage
    order; feeds the criterion-curve CSV."""
    rows = []
    for stage in report.stages:
        for sm in stage.table:
            rows.append((sm.candidate.n_active, sm.candidate.q, sm.bic))
    return rows
