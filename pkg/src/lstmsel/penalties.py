"""Gate-weight penalties, proximal maps, and degrees-of-freedom counting.

All penalties act on the gate parameter blocks only; the emission weights,
intercept, and noise variance are never penalized. Values returned here are
the raw penalty Omega(theta); the training objective multiplies by the
penalty strength.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lstm import ForwardTrace, LstmParams, ParamLayout

KINDS = ("none", "ridge", "lasso", "group_lasso", "gate_shrinkage")


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty family and strengths used during training.

    lam scales the gate-weight penalty; lam_hidden scales the
    hidden-activation penalty (whose own weight is beta, so the effective
    coefficient is lam_hidden * beta). alpha1/2/3 weight the input,
    recurrent, and bias blocks of the gate-shrinkage penalty. dropout_p is
    the per-unit drop probability applied to emitted hidden states during
    training only. zero_tol is the threshold under which a parameter counts
    as zero for degrees of freedom.
    """

    kind: str = "none"
    lam: float = 0.0
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    beta: float = 1.0
    lam_hidden: float = 0.0
    dropout_p: float = 0.0
    zero_tol: float = 1e-6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        for name in ("lam", "alpha1", "alpha2", "alpha3", "beta", "lam_hidden"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and non-negative")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError("dropout_p must lie in [0, 1)")
        if not (np.isfinite(self.zero_tol) and self.zero_tol > 0.0):
            raise ValueError("zero_tol must be finite and positive")


def penalty_value(spec: PenaltySpec, params: LstmParams) -> float:
    """Raw gate-weight penalty Omega(theta) for the given family."""
    W, U, b = params.W, params.U, params.b
    if spec.kind == "none":
        return 0.0
    if spec.kind == "ridge":
        return float(np.sum(W * W) + np.sum(U * U))
    if spec.kind == "lasso":
        return float(np.sum(np.abs(W)) + np.sum(np.abs(U)))
    if spec.kind == "group_lasso":
        hid, p = params.hidden, params.n_inputs
        total = 0.0
        for g in range(4):
            total += np.sqrt(hid * p) * np.linalg.norm(W[g])
            total += np.sqrt(hid * hid) * np.linalg.norm(U[g])
        return float(total)
    # gate_shrinkage
    return float(
        spec.alpha1 * np.sum(np.abs(W))
        + spec.alpha2 * np.sum(np.abs(U))
        + spec.alpha3 * np.sum(np.abs(b))
    )


def penalty_subgrad(spec: PenaltySpec, params: LstmParams) -> np.ndarray:
    """A subgradient of Omega(theta) as a flat vector (sign(0) taken as 0)."""
    lay = ParamLayout(params.n_inputs, params.hidden)
    out = np.zeros(lay.size)
    W, U, b = params.W, params.U, params.b
    if spec.kind == "none":
        return out
    if spec.kind == "ridge":
        out[lay.W] = (2.0 * W).ravel()
        out[lay.U] = (2.0 * U).ravel()
        return out
    if spec.kind == "lasso":
        out[lay.W] = np.sign(W).ravel()
        out[lay.U] = np.sign(U).ravel()
        return out
    if spec.kind == "group_lasso":
        hid, p = params.hidden, params.n_inputs
        dW = np.zeros_like(W)
        dU = np.zeros_like(U)
        for g in range(4):
            nw = np.linalg.norm(W[g])
            if nw > 0.0:
                dW[g] = np.sqrt(hid * p) * W[g] / nw
            nu = np.linalg.norm(U[g])
            if nu > 0.0:
                dU[g] = np.sqrt(hid * hid) * U[g] / nu
        out[lay.W] = dW.ravel()
        out[lay.U] = dU.ravel()
        return out
    out[lay.W] = (spec.alpha1 * np.sign(W)).ravel()
    out[lay.U] = (spec.alpha2 * np.sign(U)).ravel()
    out[lay.b] = (spec.alpha3 * np.sign(b)).ravel()
    return out


def smooth_penalty_grad(spec: PenaltySpec, params: LstmParams) -> np.ndarray:
    """Gradient of the smooth part of Omega (the part not handled by prox)."""
    if spec.kind == "ridge":
        return penalty_subgrad(spec, params)
    lay = ParamLayout(params.n_inputs, params.hidden)
    return np.zeros(lay.size)


def _soft(x: np.ndarray, thr: float) -> np.ndarray:
    out = np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)
    out[np.abs(x) <= thr] = 0.0
    return out


def prox(spec: PenaltySpec, params: LstmParams, step: float) -> LstmParams:
    """Proximal map of step * lam * Omega at the given parameters.

    Defined for the nonsmooth families only (the smooth ones are handled
    by their gradients): coordinate soft-thresholding for the l1 families,
    block soft-thresholding for the group penalty. Thresholded coordinates
    land on exact zeros.
    """
    if not (np.isfinite(step) and step >= 0.0):
        raise ValueError("step must be finite and non-negative")
    if spec.kind in ("none", "ridge"):
        raise ValueError(
            f"prox is undefined for the smooth penalty kind {spec.kind!r}")
    if spec.lam == 0.0 or step == 0.0:
        return params.copy()
    out = params.copy()
    thr = step * spec.lam
    if spec.kind == "lasso":
        out.W = _soft(out.W, thr)
        out.U = _soft(out.U, thr)
        return out
    if spec.kind == "group_lasso":
        hid, p = params.hidden, params.n_inputs
        for g in range(4):
            for block, d in ((out.W, hid * p), (out.U, hid * hid)):
                norm = np.linalg.norm(block[g])
                scale = 0.0
                if norm > 0.0:
                    scale = max(0.0, 1.0 - thr * np.sqrt(d) / norm)
                block[g] = block[g] * scale
        return out
    out.W = _soft(out.W, thr * spec.alpha1)
    out.U = _soft(out.U, thr * spec.alpha2)
    out.b = _soft(out.b, thr * spec.alpha3)
    return out


def prox_vector(spec: PenaltySpec, vec: np.ndarray, lay: ParamLayout,
                step: float) -> None:
    """In-place prox on a flat parameter vector (training hot path)."""
    if spec.kind in ("none", "ridge") or spec.lam == 0.0 or step == 0.0:
        return
    thr = step * spec.lam
    if spec.kind == "lasso":
        vec[lay.W] = _soft(vec[lay.W], thr)
        vec[lay.U] = _soft(vec[lay.U], thr)
        return
    if spec.kind == "group_lasso":
        hid, p = lay.hidden, lay.n_inputs
        for g in range(4):
            for sl, d in ((lay.gate_W(g), hid * p), (lay.gate_U(g), hid * hid)):
                block = vec[sl]
                norm = np.linalg.norm(block)
                scale = 0.0
                if norm > 0.0:
                    scale = max(0.0, 1.0 - thr * np.sqrt(d) / norm)
                vec[sl] = block * scale
        return
    vec[lay.W] = _soft(vec[lay.W], thr * spec.alpha1)
    vec[lay.U] = _soft(vec[lay.U], thr * spec.alpha2)
    vec[lay.b] = _soft(vec[lay.b], thr * spec.alpha3)


def hidden_penalty(trace, beta: float) -> float:
    """Activation penalty beta * sum_t |h_t|_1 of a forward trace.

    Accepts a ForwardTrace or a raw hidden-state array.
    """
    if not (np.isfinite(beta) and beta >= 0.0):
        raise ValueError("beta must be finite and non-negative")
    h = trace.h if isinstance(trace, ForwardTrace) else np.asarray(trace)
    return float(beta * np.sum(np.abs(h)))


def count_df(params: LstmParams, spec: PenaltySpec) -> int:
    """Effective degrees of freedom: active parameters plus one for sigma2.

    Under sparsity-inducing penalties a parameter is active when its
    magnitude exceeds spec.zero_tol; gate weights, gate biases, and the
    emission weights and intercept are all counted, and the noise variance
    contributes one regardless. Under the non-sparse families (none, ridge)
    every parameter is counted.
    """
    if spec.kind in ("none", "ridge"):
        return params.n_params
    tol = spec.zero_tol
    active = 0
    for block in (params.W, params.U, params.b, params.w_y):
        active += int(np.sum(np.abs(block) > tol))
    active += int(abs(params.b_y) > tol)
    return active + 1
