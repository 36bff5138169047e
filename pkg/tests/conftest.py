import os

# Cap BLAS pools before numpy loads anywhere; keeps results and timings
# independent of the host's core count.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from lstmsel.lstm import Sequence, init_params, predict_inputs
from lstmsel.numerics import Rng


def make_teacher(p, hidden, rng, sigma2=1.0):
    return init_params(p, hidden, rng, sigma2=sigma2, state_noise=0.0)


def make_dataset(teacher, n_seqs, length, rng, noise_sd=0.2, prefix="s"):
    """Sequences whose targets come from the teacher plus Gaussian noise."""
    out = []
    for i in range(n_seqs):
        x = rng.standard_normal((length, teacher.n_inputs))
        y = predict_inputs(teacher, x) + noise_sd * rng.standard_normal(length)
        out.append(Sequence(x, y, f"{prefix}{i}"))
    return out


@pytest.fixture
def tiny_dataset():
    rng = Rng(314)
    teacher = make_teacher(3, 2, rng.child(0), sigma2=0.04)
    return make_dataset(teacher, 4, 12, rng.child(1))


@pytest.fixture
def rng():
    return Rng(2024)


def assert_grad_close(analytic, numeric, rel_tol=1e-5, abs_floor=1e-8):
    """Relative comparison with an absolute floor for near-zero entries."""
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.asarray(numeric, dtype=float).ravel()
    assert analytic.shape == numeric.shape
    denom = np.maximum(np.abs(numeric), abs_floor / rel_tol)
    worst = np.max(np.abs(analytic - numeric) / denom)
    assert worst < rel_tol, f"max relative gradient error {worst:.3e}"
