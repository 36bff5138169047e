"""Estimator-style wrappers with the familiar fit/predict surface.

LstmRegressor fits a single architecture; LstmSelector runs the staged
architecture search. Both accept either one sequence (a 2-D input array
and a 1-D target array) or a list of such pairs, and follow the
get_params/set_params convention so they compose with clone and grid
utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .aghq import AghqConfig, rescore
from .lstm import Sequence, predict_inputs
from .penalties import PenaltySpec
from .selection import PipelineConfig, stepwise_hif
from .training import TrainConfig, fit
from .variational import ViConfig, fit_vi


def _as_sequences(X, y) -> list:
    if isinstance(X, (list, tuple)):
        if y is None or len(X) != len(y):
            raise ValueError("need one target array per input array")
        seqs = []
        for i, (xi, yi) in enumerate(zip(X, y)):
            xi = np.asarray(xi, dtype=np.float64)
            yi = np.asarray(yi, dtype=np.float64)
            if xi.ndim != 2 or yi.ndim != 1 or xi.shape[0] != yi.shape[0]:
                raise ValueError(f"sequence {i}: inputs must be (T, p) and "
                                 "targets (T,) with matching T")
            seqs.append(Sequence(xi, yi, seq_id=f"seq-{i:04d}"))
        widths = {s.n_inputs for s in seqs}
        if len(widths) > 1:
            raise ValueError("all sequences must share the input width")
        return seqs
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError("inputs must be (T, p) and targets (T,)")
    return [Sequence(X, y, seq_id="seq-0000")]


class LstmRegressor(BaseEstimator, RegressorMixin):
    """Penalized recurrent regressor on sequence data.

    method selects the likelihood machinery: "pmle" for the exact
    deterministic likelihood, "vi" for the stochastic-state evidence
    bound, "aghq" for the quadrature marginal rescoring of a variational
    fit.
    """

    def __init__(self, hidden_size=5, method="pmle", penalty="none",
                 lam=0.0, alpha1=1.0, alpha2=1.0, alpha3=1.0, beta=1.0,
                 lam_hidden=0.0, dropout_p=0.0, zero_tol=1e-6,
                 learning_rate=0.01, max_epochs=500, clip_norm=5.0,
                 restarts=3, tol=1e-6, patience=10, state_noise=0.1,
                 n_mc=1, eval_n_mc=128, amortized=False, quad_order=9,
                 random_state=0):
        self.hidden_size = hidden_size
        self.method = method
        self.penalty = penalty
        self.lam = lam
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.alpha3 = alpha3
        self.beta = beta
        self.lam_hidden = lam_hidden
        self.dropout_p = dropout_p
        self.zero_tol = zero_tol
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.clip_norm = clip_norm
        self.restarts = restarts
        self.tol = tol
        self.patience = patience
        self.state_noise = state_noise
        self.n_mc = n_mc
        self.eval_n_mc = eval_n_mc
        self.amortized = amortized
        self.quad_order = quad_order
        self.random_state = random_state

    def _spec(self) -> PenaltySpec:
        return PenaltySpec(kind=self.penalty, lam=self.lam,
                           alpha1=self.alpha1, alpha2=self.alpha2,
                           alpha3=self.alpha3, beta=self.beta,
                           lam_hidden=self.lam_hidden,
                           dropout_p=self.dropout_p,
                           zero_tol=self.zero_tol)

    def _train_cfg(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate,
                           max_epochs=self.max_epochs,
                           clip_norm=self.clip_norm, restarts=self.restarts,
                           tol=self.tol, patience=self.patience,
                           seed=self.random_state)

    def _vi_cfg(self) -> ViConfig:
        return ViConfig(n_mc=self.n_mc, eval_n_mc=self.eval_n_mc,
                        amortized=self.amortized,
                        state_noise=self.state_noise)

    def fit(self, X, y):
        seqs = _as_sequences(X, y)
        spec = self._spec()
        cfg = self._train_cfg()
        if self.method == "pmle":
            res = fit(seqs, self.random_state, spec, cfg,
                      hidden=self.hidden_size)
            self.variational_state_ = None
        elif self.method in ("vi", "aghq"):
            res, vstate = fit_vi(seqs, spec, cfg, self.random_state,
                                 self.hidden_size, self._vi_cfg())
            self.variational_state_ = vstate
            if self.method == "aghq":
                res = rescore(res, seqs, AghqConfig(
                    k=self.quad_order, state_noise=self.state_noise))
        else:
            raise ValueError(f"unknown method {self.method!r}")
        self.result_ = res
        self.params_ = res.params
        self.n_features_in_ = seqs[0].n_inputs
        self.loglik_ = res.loglik
        self.aic_ = res.aic
        self.bic_ = res.bic
        self.df_ = res.df
        return self

    def predict(self, X):
        if not hasattr(self, "params_"):
            raise RuntimeError("fit the model before predicting")
        if isinstance(X, (list, tuple)):
            return [predict_inputs(self.params_,
                                   np.asarray(xi, dtype=np.float64))
                    for xi in X]
        return predict_inputs(self.params_, np.asarray(X, dtype=np.float64))

    def score(self, X, y):
        """Coefficient of determination over pooled steps."""
        preds = self.predict(X)
        if isinstance(preds, list):
            yp = np.concatenate(preds)
            yt = np.concatenate([np.asarray(v, dtype=np.float64) for v in y])
        else:
            yp, yt = preds, np.asarray(y, dtype=np.float64)
        ss_res = float(np.sum((yt - yp) ** 2))
        ss_tot = float(np.sum((yt - np.mean(yt)) ** 2))
        return 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0


class LstmSelector(BaseEstimator):
    """Staged architecture search wrapped as an estimator.

    fit runs the hidden-size grid, backward input pruning, and the
    fine-tuning pass; the chosen model is exposed through report_,
    selected_inputs_ (1-based labels), chosen_q_, and predict.
    """

    def __init__(self, q_grid=(2, 4), criterion="bic", method="pmle",
                 penalty="none", lam=0.0, zero_tol=1e-6,
                 learning_rate=0.01, max_epochs=500, restarts=3,
                 clip_norm=5.0, tol=1e-6, patience=10, state_noise=0.1,
                 oos_fraction=0.2, quad_order=9, random_state=0):
        self.q_grid = q_grid
        self.criterion = criterion
        self.method = method
        self.penalty = penalty
        self.lam = lam
        self.zero_tol = zero_tol
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.restarts = restarts
        self.clip_norm = clip_norm
        self.tol = tol
        self.patience = patience
        self.state_noise = state_noise
        self.oos_fraction = oos_fraction
        self.quad_order = quad_order
        self.random_state = random_state

    def fit(self, X, y):
        seqs = _as_sequences(X, y)
        cfg = PipelineConfig(
            estimator=self.method,
            penalty=PenaltySpec(kind=self.penalty, lam=self.lam,
                                zero_tol=self.zero_tol),
            train=TrainConfig(learning_rate=self.learning_rate,
                              max_epochs=self.max_epochs,
                              clip_norm=self.clip_norm,
                              restarts=self.restarts, tol=self.tol,
                              patience=self.patience,
                              seed=self.random_state),
            vi=ViConfig(state_noise=self.state_noise),
            aghq=AghqConfig(k=self.quad_order,
                            state_noise=self.state_noise),
            oos_fraction=self.oos_fraction,
        )
        report = stepwise_hif(seqs, tuple(self.q_grid), self.criterion,
                              cfg, self.random_state)
        self.report_ = report
        self.selected_inputs_ = list(report.selected_inputs)
        self.chosen_q_ = report.chosen_q
        self.params_ = report.final.fit.params
        self.input_mask_ = np.asarray(report.final.candidate.input_mask,
                                      dtype=bool)
        self.n_features_in_ = seqs[0].n_inputs
        return self

    def predict(self, X):
        if not hasattr(self, "params_"):
            raise RuntimeError("fit the selector before predicting")
        idx = np.flatnonzero(self.input_mask_)

        def one(xi):
            xi = np.asarray(xi, dtype=np.float64)
            if xi.shape[1] != self.n_features_in_:
                raise ValueError("input width differs from fit")
            return predict_inputs(self.params_, xi[:, idx])

        if isinstance(X, (list, tuple)):
            return [one(xi) for xi in X]
        return one(X)
