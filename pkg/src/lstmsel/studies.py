"""Synthetic selection studies and their scoring.

Three generators: a sparse recurrent teacher with autocorrelated relevant
inputs and many pure-noise inputs, a smaller variant, and a static
nonlinear regression cut into short windows. Each study runs the stepwise
selection pipeline over replicated datasets and aggregates recovery
metrics; replicate failures are recorded and excluded, never silently
dropped.
"""

from __future__ import annotations

import multiprocessing
import time
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .lstm import LstmParams, Sequence, forward
from .numerics import EvaluationError, Rng
from .selection import (
    PipelineConfig,
    SelectionError,
    _mask_columns,
    stepwise_hif,
)
from .training import FitError, validation_rmse

STUDIES = ("sim1", "sim2", "sim3")

_DEFAULTS = {
    # p, relevant labels (1-based), true hidden size, T, noise sd, q grid
    "sim1": (13, (1, 2, 3), 10, 50, 0.5, (5, 10, 15)),
    "sim2": (10, (1, 2, 3), 5, 50, 0.5, (5, 10, 15)),
    "sim3": (10, (1, 2, 3, 4, 5), None, 5, 0.3, (2, 4, 8)),
}

AR_COEF = 0.6


@dataclass(frozen=True)
class SimSpec:
    """One study configuration: which generator, how much data, how many
    replicates. q_grid, noise_sd, and n_test default per study."""

    study: str
    n_obs: int
    replicates: int = 50
    seed: int = 0
    q_grid: tuple | None = None
    noise_sd: float | None = None
    n_test: int | None = None

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ValueError(f"unknown study {self.study!r}")
        if self.n_obs < 10:
            raise ValueError("n_obs must be at least 10")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        p, rel, h, T, noise, grid = _DEFAULTS[self.study]
        if self.q_grid is None:
            object.__setattr__(self, "q_grid", grid)
        else:
            object.__setattr__(self, "q_grid",
                               tuple(int(q) for q in self.q_grid))
        if self.noise_sd is None:
            object.__setattr__(self, "noise_sd", noise)
        elif self.noise_sd <= 0:
            raise ValueError("noise_sd must be positive")
        if self.n_test is None:
            object.__setattr__(self, "n_test", 200 if self.study == "sim3"
                               else 50)
        elif self.n_test < 1:
            raise ValueError("n_test must be >= 1")

    @property
    def n_inputs(self) -> int:
        return _DEFAULTS[self.study][0]

    @property
    def relevant(self) -> tuple:
        return _DEFAULTS[self.study][1]

    @property
    def true_hidden(self):
        return _DEFAULTS[self.study][2]

    @property
    def seq_length(self) -> int:
        return _DEFAULTS[self.study][3]


@dataclass
class GroundTruth:
    """What the generator actually used; relevant inputs are 1-based
    labels matching the x1..xp column names."""

    relevant: tuple
    hidden: int | None
    n_inputs: int
    teacher: LstmParams | None = None


def _ar1_inputs(rng: Rng, T: int, k: int) -> np.ndarray:
    x = np.empty((T, k))
    innov_sd = np.sqrt(1.0 - AR_COEF ** 2)
    x[0] = rng.standard_normal(k)
    for t in range(1, T):
        x[t] = AR_COEF * x[t - 1] + innov_sd * rng.standard_normal(k)
    return x


def _teacher_params(rng: Rng, p: int, relevant, hidden: int,
                    noise_sd: float) -> LstmParams:
    k = len(relevant)
    W = np.zeros((4, hidden, p))
    W[:, :, [r - 1 for r in relevant]] = rng.standard_normal(
        (4, hidden, k)) / np.sqrt(k)
    U = rng.standard_normal((4, hidden, hidden)) / np.sqrt(hidden)
    b = np.zeros((4, hidden))
    b[1] = 1.0
    w_y = rng.standard_normal(hidden) / np.sqrt(hidden)
    return LstmParams(W=W, U=U, b=b, w_y=w_y, b_y=0.0,
                      sigma2=noise_sd ** 2, state_noise=0.0)


def _sim12_inputs(spec: SimSpec, rng: Rng, lengths: list) -> list:
    """Input matrices only: AR(1) columns for relevant inputs, iid noise
    columns elsewhere."""
    mats = []
    p = spec.n_inputs
    rel = [r - 1 for r in spec.relevant]
    irrel = [j for j in range(p) if j not in rel]
    for T in lengths:
        x = np.empty((T, p))
        x[:, rel] = _ar1_inputs(rng, T, len(rel))
        if irrel:
            x[:, irrel] = rng.standard_normal((T, len(irrel)))
        mats.append(x)
    return mats


def _emit(teacher, mats, noise_sd, rng, prefix) -> list:
    out = []
    for i, x in enumerate(mats):
        signal = forward(teacher, x).y_hat
        y = signal + noise_sd * rng.standard_normal(x.shape[0])
        out.append(Sequence(inputs=x, targets=y,
                            seq_id=f"{prefix}-{i + 1:04d}"))
    return out


def _sim3_sequences(spec: SimSpec, rng: Rng, n_windows: int,
                    prefix: str) -> list:
    T = spec.seq_length
    out = []
    for i in range(n_windows):
        x = rng.standard_normal((T, spec.n_inputs))
        signal = (0.5 * x[:, 0] + 0.3 * x[:, 1] ** 2
                  - 0.7 * x[:, 2] * x[:, 3] + 0.2 * np.sin(x[:, 4]))
        y = signal + spec.noise_sd * rng.standard_normal(T)
        out.append(Sequence(inputs=x, targets=y,
                            seq_id=f"{prefix}-{i + 1:04d}"))
    return out


def _split_lengths(n_obs: int, T: int) -> list:
    n_full, rem = divmod(n_obs, T)
    lengths = [T] * n_full
    if rem >= 2:
        lengths.append(rem)
    if not lengths:
        raise ValueError("n_obs too small for one sequence")
    return lengths


def generate(spec: SimSpec, rng: Rng):
    """Draw one replicate: (train sequences, test sequences, truth).

    For the recurrent studies a sparse teacher network is drawn once per
    replicate, its output rescaled to unit signal standard deviation on
    the training inputs, and observation noise added. The static study
    draws iid inputs and applies a fixed nonlinear formula.
    """
    if spec.study == "sim3":
        r_train, r_test = rng.child(1), rng.child(2)
        n_windows = max(1, spec.n_obs // spec.seq_length)
        train = _sim3_sequences(spec, r_train, n_windows, "train")
        test = _sim3_sequences(spec, r_test, spec.n_test, "test")
        truth = GroundTruth(relevant=spec.relevant, hidden=None,
                            n_inputs=spec.n_inputs)
        return train, test, truth

    r_teacher, r_train, r_test = rng.child(0), rng.child(1), rng.child(2)
    teacher = _teacher_params(r_teacher, spec.n_inputs, spec.relevant,
                              spec.true_hidden, spec.noise_sd)
    lengths = _split_lengths(spec.n_obs, spec.seq_length)
    train_x = _sim12_inputs(spec, r_train, lengths)
    # normalize the signal scale so the signal-to-noise ratio is stable
    signal = np.concatenate([forward(teacher, x).y_hat for x in train_x])
    sd = float(np.std(signal))
    teacher.w_y = teacher.w_y * (1.0 / sd if sd > 1e-8 else 1.0)
    train = _emit(teacher, train_x, spec.noise_sd, r_train, "train")
    test_x = _sim12_inputs(spec, r_test,
                           [spec.seq_length] * spec.n_test)
    test = _emit(teacher, test_x, spec.noise_sd, r_test, "test")
    truth = GroundTruth(relevant=spec.relevant, hidden=spec.true_hidden,
                        n_inputs=spec.n_inputs, teacher=teacher)
    return train, test, truth


def score_selection(truth: GroundTruth, selected_inputs, selected_q):
    """Recovery metrics for one replicate.

    selected_inputs are 1-based labels. Returns a dict with true-negative
    rate over irrelevant inputs, false-discovery rate over the selection,
    the relevant-set inclusion flag, the hidden-size match flag (None when
    the truth has no hidden size), and the exact-recovery flag.
    """
    rel = set(truth.relevant)
    sel = set(int(j) for j in selected_inputs)
    allv = set(range(1, truth.n_inputs + 1))
    if not sel <= allv:
        raise ValueError("selected inputs outside 1..p")
    irrel = allv - rel
    tnr = len(irrel - sel) / len(irrel) if irrel else 1.0
    fdr = len(sel & irrel) / len(sel) if sel else 0.0
    pi = int(rel <= sel)
    if truth.hidden is None:
        ph = None
    else:
        ph = int(selected_q == truth.hidden)
    exact = int(sel == rel)
    pt = int(pi and exact and (ph is None or ph == 1))
    return {"tnr": tnr, "fdr": fdr, "pi": pi, "ph": ph, "pt": pt}


@dataclass(eq=False)
class MetricRow:
    """Aggregate over successful replicates of one (estimator, criterion)
    cell."""

    study: str
    n_obs: int
    estimator: str
    criterion: str
    n_ok: int
    n_failed: int
    tnr: float
    fdr: float
    pi: float
    ph: float | None
    pt: float
    q_mean: float
    oos_rmse: float
    runtime_s: float


def _replicate_seed(spec: SimSpec, rep: int, est_i: int, crit_i: int) -> int:
    r = Rng(spec.seed).child(rep + 1).child(1009 + est_i * 31 + crit_i)
    return int(r.integers(0, 2 ** 62))


def run_replicate(spec: SimSpec, pipeline: PipelineConfig, estimators,
                  criteria, rep: int) -> list:
    """All (estimator, criterion) cells for one replicate; one record per
    cell with either metrics or an error string."""
    rng = Rng(spec.seed).child(rep + 1)
    train, test, truth = generate(spec, rng.child(0))
    records = []
    for ei, est in enumerate(estimators):
        for ci, crit in enumerate(criteria):
            rec = {"rep": rep, "estimator": est, "criterion": crit,
                   "error": None}
            t0 = time.perf_counter()
            try:
                cfg = replace(pipeline, estimator=est)
                report = stepwise_hif(train, spec.q_grid, crit, cfg,
                                      _replicate_seed(spec, rep, ei, ci))
                metrics = score_selection(truth, report.selected_inputs,
                                          report.chosen_q)
                mask = report.final.candidate.input_mask
                oos = validation_rmse(report.final.fit.params,
                                      _mask_columns(test, mask))
                rec.update(metrics)
                rec["q"] = report.chosen_q
                rec["oos_rmse"] = oos
                rec["degenerate"] = int(report.degenerate_noise)
            except (FitError, SelectionError, EvaluationError) as exc:
                rec["error"] = str(exc)
            rec["runtime_s"] = time.perf_counter() - t0
            records.append(rec)
    return records


def _aggregate(spec, estimators, criteria, all_records) -> list:
    rows = []
    for est in estimators:
        for crit in criteria:
            cell = [r for r in all_records
                    if r["estimator"] == est and r["criterion"] == crit]
            ok = [r for r in cell if r["error"] is None]
            failed = len(cell) - len(ok)
            if ok:
                ph_vals = [r["ph"] for r in ok if r["ph"] is not None]
                row = MetricRow(
                    study=spec.study, n_obs=spec.n_obs, estimator=est,
                    criterion=crit, n_ok=len(ok), n_failed=failed,
                    tnr=float(np.mean([r["tnr"] for r in ok])),
                    fdr=float(np.mean([r["fdr"] for r in ok])),
                    pi=float(np.mean([r["pi"] for r in ok])),
                    ph=(float(np.mean(ph_vals)) if ph_vals else None),
                    pt=float(np.mean([r["pt"] for r in ok])),
                    q_mean=float(np.mean([r["q"] for r in ok])),
                    oos_rmse=float(np.mean([r["oos_rmse"] for r in ok])),
                    runtime_s=float(np.mean([r["runtime_s"] for r in ok])),
                )
            else:
                row = MetricRow(
                    study=spec.study, n_obs=spec.n_obs, estimator=est,
                    criterion=crit, n_ok=0, n_failed=failed,
                    tnr=float("nan"), fdr=float("nan"), pi=float("nan"),
                    ph=None, pt=float("nan"), q_mean=float("nan"),
                    oos_rmse=float("nan"), runtime_s=float("nan"),
                )
            rows.append(row)
    return rows


def run_study(spec: SimSpec, pipeline: PipelineConfig,
              estimators=("pmle",), criteria=("bic",), workers: int = 1):
    """Run every replicate of one study and aggregate.

    Returns (rows, records): aggregate MetricRow per (estimator,
    criterion) cell, plus the raw per-replicate records including any
    recorded failures. Results are independent of the worker count;
    replicates are aggregated in index order.
    """
    estimators = tuple(estimators)
    criteria = tuple(criteria)
    reps = list(range(spec.replicates))
    if workers <= 1 or len(reps) == 1:
        batches = [run_replicate(spec, pipeline, estimators, criteria, rep)
                   for rep in reps]
    else:
        args = [(spec, pipeline, estimators, criteria, rep) for rep in reps]
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(workers, len(reps))) as pool:
            batches = pool.starmap(run_replicate, args)
    records = [rec for batch in batches for rec in batch]
    records.sort(key=lambda r: (r["rep"], r["estimator"], r["criterion"]))
    return _aggregate(spec, estimators, criteria, records), records


# ---------------------------------------------------------------------------
# Linear stepwise baseline


def _ols_bic(X, y, cols, criterion: str):
    n = y.size
    design = np.concatenate([np.ones((n, 1)), X[:, cols]], axis=1)
    gram = design.T @ design
    rhs = design.T @ y
    try:
        coef = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        warnings.warn("singular design; adding ridge jitter")
        coef = np.linalg.solve(gram + 1e-8 * np.eye(gram.shape[0]), rhs)
    resid = y - design @ coef
    rss = float(resid @ resid)
    sigma2 = max(rss / n, 1e-300)
    ll = -0.5 * n * (np.log(2.0 * np.pi * sigma2) + 1.0)
    df = design.shape[1] + 1
    if criterion == "aic":
        return -2.0 * ll + 2.0 * df, coef
    return -2.0 * ll + np.log(n) * df, coef


def stepwise_linear_baseline(train, test=None, criterion: str = "bic"):
    """Backward + forward stepwise main-effects OLS over pooled steps.

    Starts from the full main-effects model; at each round considers every
    single-input removal and addition, takes the best move, and stops when
    no move improves the criterion. Returns (selected 1-based labels,
    out-of-sample RMSE on the pooled test steps, or None).
    """
    if criterion not in ("aic", "bic"):
        raise ValueError("criterion must be 'aic' or 'bic'")
    X = np.concatenate([s.inputs for s in train])
    y = np.concatenate([s.targets for s in train])
    p = X.shape[1]
    current = list(range(p))
    score, _ = _ols_bic(X, y, current, criterion)
    while True:
        best_move = None
        best_score = score
        for j in current:
            cols = [c for c in current if c != j]
            s, _ = _ols_bic(X, y, cols, criterion)
            if s < best_score:
                best_score, best_move = s, cols
        for j in range(p):
            if j in current:
                continue
            cols = sorted(current + [j])
            s, _ = _ols_bic(X, y, cols, criterion)
            if s < best_score:
                best_score, best_move = s, cols
        if best_move is None:
            break
        current, score = best_move, best_score
    _, coef = _ols_bic(X, y, current, criterion)
    rmse = None
    if test is not None:
        Xt = np.concatenate([s.inputs for s in test])
        yt = np.concatenate([s.targets for s in test])
        design = np.concatenate([np.ones((yt.size, 1)), Xt[:, current]],
                                axis=1)
        pred = design @ coef
        rmse = float(np.sqrt(np.mean((yt - pred) ** 2)))
    return sorted(c + 1 for c in current), rmse
