"""Post-selection covariate effect summaries.

The effect of a covariate is the averaged prediction contrast between
setting that column one standard deviation above and below its mean,
halved; uncertainty comes from a sequence-level percentile bootstrap.
Covariates are referred to by their 1-based labels, matching the x1..xp
dataset columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lstm import Sequence, predict, predict_inputs
from .numerics import Rng
from .selection import CandidateModel, PipelineConfig, ScoredModel, _fit_candidate, candidate_seed
from .training import FitResult


@dataclass
class EffectRow:
    covariate: int
    tau: float
    ci_low: float
    ci_high: float
    delta_bic: float | None = None


def _tau_statistic(params, dataset, col, mult, sums, sumsq, lengths):
    """Half the mean prediction contrast on a weighted resample.

    mult holds per-sequence multiplicities (all ones for the point
    estimate). The pooled column mean/SD and the contrasts are all
    recomputed under those weights, so bootstrap draws see the whole
    statistic, not just reweighted residuals.
    """
    total = float(np.dot(mult, lengths))
    mean = float(np.dot(mult, sums) / total)
    var = float(np.dot(mult, sumsq) / total) - mean * mean
    sd = float(np.sqrt(max(var, 0.0)))
    sel = np.flatnonzero(mult)
    probes = []
    for i in sel:
        seq = dataset[i]
        hi = seq.inputs.copy()
        lo = seq.inputs.copy()
        hi[:, col] = mean + sd
        lo[:, col] = mean - sd
        zeros = np.zeros(seq.length)
        probes.append(Sequence(hi, zeros, f"{seq.seq_id}+"))
        probes.append(Sequence(lo, zeros, f"{seq.seq_id}-"))
    preds = predict(params, probes)
    acc = 0.0
    for k, i in enumerate(sel):
        diff = preds[2 * k] - preds[2 * k + 1]
        acc += mult[i] * float(np.sum(diff))
    return acc / total / 2.0


def effect_size(result: FitResult, dataset: list, j: int, b: int = 200,
                seed: int = 0) -> EffectRow:
    """Bootstrap effect estimate for covariate j (1-based label).

    tau is half the mean prediction contrast between the +1 SD and -1 SD
    versions of column j, pooled over all steps of all sequences. The CI
    resamples whole sequences with replacement b times, recomputes the
    statistic in full on each draw, and takes the 2.5 and 97.5
    percentiles, widened if needed so the point estimate is always
    inside. b=1 returns the degenerate interval (tau, tau).
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    params = result.params
    if not 1 <= j <= params.n_inputs:
        raise ValueError(
            f"covariate {j} outside the model's inputs 1..{params.n_inputs}")
    if b < 1:
        raise ValueError("bootstrap size must be >= 1")
    col = j - 1
    n = len(dataset)
    sums = np.array([float(np.sum(s.inputs[:, col])) for s in dataset])
    sumsq = np.array([float(np.sum(s.inputs[:, col] ** 2)) for s in dataset])
    lengths = np.array([float(s.length) for s in dataset])
    ones = np.ones(n)
    tau = _tau_statistic(params, dataset, col, ones, sums, sumsq, lengths)
    if b == 1:
        return EffectRow(covariate=j, tau=tau, ci_low=tau, ci_high=tau)
    rng = Rng(seed).child(j)
    boots = np.empty(b)
    for k in range(b):
        idx = rng.integers(0, n, size=n)
        mult = np.bincount(idx, minlength=n).astype(float)
        boots[k] = _tau_statistic(params, dataset, col, mult, sums, sumsq,
                                  lengths)
    lo, hi = np.percentile(boots, [2.5, 97.5])
    return EffectRow(covariate=j, tau=tau,
                     ci_low=float(min(lo, tau)),
                     ci_high=float(max(hi, tau)))


def delta_bic(dataset: list, scored: ScoredModel, j: int,
              cfg: PipelineConfig, seed: int, refit: bool = True) -> float:
    """Criterion cost of removing covariate j from a selected model.

    j is the 1-based label in the ORIGINAL input numbering and must be
    active in the selected model. Positive values mean removal hurts.
    refit=True refits the reduced candidate through the same pipeline;
    refit=False re-scores the selected parameters with column j deleted
    (exact-likelihood results only).
    """
    cand = scored.candidate
    mask = list(cand.input_mask)
    if not 1 <= j <= len(mask):
        raise ValueError(f"covariate {j} outside 1..{len(mask)}")
    if not mask[j - 1]:
        raise ValueError(f"covariate {j} is not active in the model")
    if cand.n_active == 1:
        raise ValueError("cannot remove the model's only input")
    mask[j - 1] = False
    reduced = CandidateModel(cand.q, tuple(mask), cand.penalty,
                             cand.estimator)
    if refit:
        res = _fit_candidate(dataset, reduced, cfg, candidate_seed(seed,
                                                                   reduced))
        return float(res.bic - scored.bic)
    if scored.fit.loglik_kind != "exact":
        raise ValueError("refit=False needs an exact-likelihood fit")
    from .lstm import dataset_log_likelihood, total_steps
    from .penalties import count_df
    from .training import criteria_from

    # delete column j from the fitted weights and recount
    sub_col = sum(mask[:j - 1])  # position of j among the active columns
    params = scored.fit.params.copy()
    keep = [c for c in range(params.n_inputs) if c != sub_col]
    params.W = np.ascontiguousarray(params.W[:, :, keep])
    sub = [Sequence(s.inputs[:, [c for c in range(s.n_inputs)
                                 if c != sub_col]], s.targets, s.seq_id)
           for s in _mask_original(dataset, cand.input_mask)]
    ll = dataset_log_likelihood(params, sub)
    df = count_df(params, cand.penalty)
    _, bic = criteria_from(ll, df, total_steps(sub))
    return float(bic - scored.bic)


def _mask_original(dataset, mask):
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    return [Sequence(s.inputs[:, idx], s.targets, s.seq_id) for s in dataset]


def effects_table(result: FitResult, dataset: list, covariates=None,
                  b: int = 200, seed: int = 0):
    """EffectRow per requested covariate of a plain fit (all by default);
    labels index the dataset's own columns."""
    if covariates is None:
        covariates = range(1, result.params.n_inputs + 1)
    return [effect_size(result, dataset, int(j), b=b, seed=seed)
            for j in covariates]


def selection_effects(dataset: list, scored: ScoredModel,
                      cfg: PipelineConfig = None, seed: int = 0,
                      covariates=None, b: int = 200,
                      with_delta: bool = False):
    """Effects of a selected model's active covariates.

    dataset uses the ORIGINAL column layout; labels in the result are the
    original 1-based ones. with_delta additionally refits without each
    covariate to report its criterion cost (needs cfg).
    """
    active = [i + 1 for i in scored.candidate.active_indices()]
    if covariates is None:
        covariates = active
    masked = _mask_original(dataset, scored.candidate.input_mask)
    rows = []
    for label in covariates:
        label = int(label)
        if label not in active:
            raise ValueError(f"covariate {label} is not in the selected "
                             "model")
        pos = active.index(label) + 1
        row = effect_size(scored.fit, masked, pos, b=b, seed=seed)
        row.covariate = label
        if with_delta and scored.candidate.n_active > 1:
            if cfg is None:
                raise ValueError("delta BIC needs the pipeline config")
            row.delta_bic = delta_bic(dataset, scored, label, cfg, seed)
        rows.append(row)
    return rows
