"""Penalized LSTM training and likelihood-based architecture selection."""

import os as _os

# cap BLAS threading before numpy initializes; single-threaded linear
# algebra keeps replicated runs reproducible and avoids oversubscription
# when replicates run in parallel worker processes
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .numerics import Rng, gauss_hermite_rule
from .lstm import LstmParams, Sequence, cell_step, forward, log_likelihood
from .penalties import PenaltySpec, penalty_value, prox, count_df
from .training import TrainConfig, FitResult, fit
from .variational import ViConfig, fit_vi, elbo
from .aghq import AghqConfig, sequence_marginal, fit_aghq
from .selection import (
    CandidateModel,
    information_criteria,
    select_model,
    stepwise_hif,
)
from .estimators import LstmRegressor, LstmSelector

__version__ = "0.1.0"

__all__ = [
    "Rng",
    "gauss_hermite_rule",
    "LstmParams",
    "Sequence",
    "cell_step",
    "forward",
    "log_likelihood",
    "PenaltySpec",
    "penalty_value",
    "prox",
    "count_df",
    "TrainConfig",
    "FitResult",
    "fit",
    "ViConfig",
    "fit_vi",
    "elbo",
    "AghqConfig",
    "sequence_marginal",
    "fit_aghq",
    "CandidateModel",
    "information_criteria",
    "select_model",
    "stepwise_hif",
    "LstmRegressor",
    "LstmSelector",
    "__version__",
]
