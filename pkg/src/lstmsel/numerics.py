"""Numerical substrate shared by every other module.

Seeded counter-based random streams, overflow-safe scalar maps, Gauss-Hermite
quadrature rules, and a central-difference gradient checker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF


class EvaluationError(RuntimeError):
    """A numeric evaluation produced a non-finite value."""

    def __init__(self, message: str, coordinate: int | None = None):
        super().__init__(message)
        self.coordinate = coordinate


def _mix64(z: int) -> int:
    """splitmix64 finalizer, a 64-bit bijective mixer."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class Rng:
    """Counter-based random stream addressed by a (seed, stream) pair.

    The same pair always reproduces the same draws regardless of what other
    streams were consumed, which is what makes parallel studies replayable.
    Child streams derived via :meth:`child` are distinct for distinct
    indices.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, index: int) -> "Rng":
        """Derive an independent stream for a sub-task.

        Mixing the parent stream with the child index through splitmix64
        keeps distinct (parent, index) pairs on distinct streams.
        """
        sub = _mix64((_mix64(self.stream) + int(index) + 1) & _MASK64)
        return Rng(self.seed, sub)

    # Thin passthroughs so call sites do not reach for .gen everywhere.
    def standard_normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size=size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self.gen.normal(loc=loc, scale=scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low=low, high=high, size=size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.gen.integers(low, high=high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


def stable_sigmoid(x):
    """Logistic function computed without overflow for any float input."""
    arr = np.asarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def stable_tanh(x):
    """Hyperbolic tangent; numpy's implementation is already saturating."""
    out = np.tanh(np.asarray(x, dtype=np.float64))
    if out.ndim == 0:
        return float(out)
    return out


def log_gaussian_pdf(y, mean, var):
    """Log density of N(mean, var) at y, elementwise.

    var must be strictly positive; raises ValueError otherwise.
    """
    v = np.asarray(var, dtype=np.float64)
    if np.any(v <= 0.0) or not np.all(np.isfinite(v)):
        raise ValueError("variance must be finite and strictly positive")
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(mean, dtype=np.float64)
    out = -0.5 * (np.log(2.0 * np.pi * v) + (y - m) ** 2 / v)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite nodes and weights for weight function exp(-x^2)."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray


def gauss_hermite_rule(order: int) -> QuadratureRule:
    """Gauss-Hermite rule (physicists' convention) of the given order.

    Nodes are the eigenvalues of the symmetric Jacobi matrix and weights
    come from the first components of its eigenvectors (Golub-Welsch).
    The rule integrates exp(-x^2) * poly exactly for polynomials up to
    degree 2*order - 1; weights sum to sqrt(pi).
    """
    if not isinstance(order, (int, np.integer)) or order < 1 or order > 64:
        raise ValueError("order must be an integer in [1, 64]")
    order = int(order)
    if order == 1:
        return QuadratureRule(1, np.zeros(1), np.array([np.sqrt(np.pi)]))

    off = np.sqrt(np.arange(1, order) / 2.0)
    jac = np.diag(off, -1) + np.diag(off, 1)
    vals, vecs = np.linalg.eigh(jac)
    nodes = vals
    weights = np.sqrt(np.pi) * vecs[0, :] ** 2

    # eigh is backward-stable but not symmetry-aware: average the +/- node
    # pairs so the rule is exactly symmetric, and pin the center node of an
    # odd rule to zero.
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    if order % 2 == 1:
        nodes[order // 2] = 0.0

    if np.any(weights <= 0.0):
        raise EvaluationError("quadrature weights must be positive")
    return QuadratureRule(order, nodes, weights)


def finite_diff_grad(fn, theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    Raises EvaluationError (with the offending coordinate) if any probe
    evaluation is non-finite.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1:
        raise ValueError("theta must be a flat vector")
    if not np.isfinite(step) or step <= 0.0:
        raise ValueError("step must be a positive float")
    grad = np.empty_like(theta)
    for j in range(theta.size):
        probe = theta.copy()
        probe[j] = theta[j] + step
        hi = fn(probe)
        probe[j] = theta[j] - step
        lo = fn(probe)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise EvaluationError(
                f"non-finite objective at coordinate {j}", coordinate=j
            )
        grad[j] = (hi - lo) / (2.0 * step)
    return grad


def check_array(a, name: str, ndim: int | None = None) -> np.ndarray:
    """Coerce to a float64 array and require finite entries."""
    arr = np.asarray(a, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimension(s), got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def logsumexp(values: np.ndarray, axis=None):
    """Stable log-sum-exp along an axis; all -inf slices stay -inf."""
    values = np.asarray(values, dtype=np.float64)
    hi = np.max(values, axis=axis, keepdims=True)
    # guard the shift so -inf maxima do not produce inf - inf = nan
    shift = np.where(np.isfinite(hi), hi, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(values - shift), axis=axis,
                            keepdims=True)) + hi
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)
