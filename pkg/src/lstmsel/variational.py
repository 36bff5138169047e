"""Variational inference over stochastic hidden states.

The approximating family is a diagonal Gaussian per time step and hidden
unit. Sampling uses the reparameterization h = mu + sigma * eps, so the
bound has pathwise gradients. The emission and entropy terms are computed
in closed form; the transition term is evaluated along the sampled path.
Free-form per-step (mu, log sigma) is the default; an amortized inference
network (one tanh hidden layer) is selectable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .lstm import (
    LstmParams,
    ParamLayout,
    Sequence,
    _batch_forward,
    group_by_length,
    init_params,
    total_steps,
)
from .numerics import Rng
from .penalties import PenaltySpec, count_df, penalty_subgrad, penalty_value
from .training import (
    FitError,
    FitResult,
    TrainConfig,
    _Adam,
    clip_gradient,
    criteria_from,
)
from .penalties import prox_vector

LOG_2PI = np.log(2.0 * np.pi)
ENTROPY_CONST = 0.5 * (LOG_2PI + 1.0)


@dataclass(frozen=True)
class ViConfig:
    """Variational-inference settings beyond the shared TrainConfig."""

    n_mc: int = 1
    eval_n_mc: int = 128
    amortized: bool = False
    state_noise: float = 0.1
    transition: str = "sampled"
    net_width: int = 16

    def __post_init__(self):
        if self.n_mc < 1 or self.eval_n_mc < 1:
            raise ValueError("n_mc and eval_n_mc must be >= 1")
        if not (np.isfinite(self.state_noise) and self.state_noise > 0.0):
            raise ValueError("state_noise must be positive")
        if self.transition not in ("sampled", "closed_form"):
            raise ValueError("transition must be 'sampled' or 'closed_form'")
        if self.net_width < 1:
            raise ValueError("net_width must be >= 1")


@dataclass
class InferenceNet:
    """Single-hidden-layer map from (x_t, one-step mean) to (mu_t, log sigma_t)."""

    A1: np.ndarray
    c1: np.ndarray
    A2: np.ndarray
    c2: np.ndarray

    def size(self) -> int:
        return self.A1.size + self.c1.size + self.A2.size + self.c2.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.A1.ravel(), self.c1, self.A2.ravel(), self.c2])

    @staticmethod
    def from_vector(vec, width, n_in, hidden):
        nA1 = width * n_in
        nA2 = 2 * hidden * width
        A1 = vec[:nA1].reshape(width, n_in).copy()
        c1 = vec[nA1:nA1 + width].copy()
        A2 = vec[nA1 + width:nA1 + width + nA2].reshape(2 * hidden, width).copy()
        c2 = vec[nA1 + width + nA2:nA1 + width + nA2 + 2 * hidden].copy()
        return InferenceNet(A1, c1, A2, c2)


@dataclass
class VariationalState:
    """Variational parameters phi for a dataset.

    Free-form mode stores per-sequence (T, H) arrays of means and log
    standard deviations keyed by sequence id. Amortized mode stores the
    inference network instead; per-step parameters are then path dependent
    and produced on the fly.
    """

    mode: str
    hidden: int
    mu: dict = field(default_factory=dict)
    log_sigma: dict = field(default_factory=dict)
    net: InferenceNet | None = None

    def __post_init__(self):
        if self.mode not in ("free_form", "amortized"):
            raise ValueError("mode must be 'free_form' or 'amortized'")
        if self.mode == "amortized" and self.net is None:
            raise ValueError("amortized state requires an inference net")


@dataclass
class ElboEstimate:
    """ELBO value with its per-term breakdown.

    value = emission + transition + entropy - penalty, where penalty is
    lam * Omega(theta). Emission and entropy are exact; the transition term
    is a Monte Carlo average over n_mc sampled paths.
    """

    value: float
    n_mc: int
    emission: float
    transition: float
    entropy: float
    penalty: float


def _require_stochastic(params: LstmParams):
    if params.state_noise <= 0.0:
        raise ValueError("variational inference requires state_noise > 0")


def _group_arrays(params: LstmParams):
    hid = params.hidden
    W4 = params.W.reshape(4 * hid, params.n_inputs)
    U4 = params.U.reshape(4 * hid, hid)
    U4T = np.ascontiguousarray(U4.T)
    b4 = params.b.reshape(4 * hid)
    return W4, U4, U4T, b4


def _emission_terms(params, Y, Mu, Ls):
    """Closed-form expected emission log-density and its pieces.

    Returns (value, resid, sig2q) where resid = y - wy.mu - by per step and
    sig2q is the per-step variational variance array.
    """
    sig2q = np.exp(2.0 * Ls)
    mean = np.tensordot(Mu, params.w_y, axes=([2], [0])) + params.b_y
    resid = Y - mean
    quad = np.tensordot(sig2q, params.w_y ** 2, axes=([2], [0]))
    value = float(
        np.sum(-0.5 * (LOG_2PI + np.log(params.sigma2))
               - resid * resid / (2.0 * params.sigma2))
        - np.sum(quad) / (2.0 * params.sigma2)
    )
    return value, resid, sig2q


def _entropy_term(Ls) -> float:
    return float(Ls.size * ENTROPY_CONST + np.sum(Ls))


def _transition_sampled(params, X, Mu, Ls, eps):
    """Pathwise transition term for one sampled noise array (T, N, H).

    Returns (value, caches for the backward pass).
    """
    _, _, U4T, b4 = _group_arrays(params)
    W4 = params.W.reshape(4 * params.hidden, params.n_inputs)
    Zx = X @ W4.T + b4
    sig = np.exp(Ls)
    Hsamp = Mu + sig * eps
    Hprev = np.concatenate(
        [np.zeros((1,) + Hsamp.shape[1:]), Hsamp[:-1]], axis=0)
    I, F, O, G, C, TC, Htil = _kernels.vi_forward_scan(Zx, U4T, Hprev)
    s2 = params.state_noise ** 2
    diff = Hsamp - Htil
    value = float(
        -0.5 * diff.size * (LOG_2PI + np.log(s2))
        - np.sum(diff * diff) / (2.0 * s2)
    )
    caches = (Zx, sig, Hsamp, Hprev, I, F, O, G, C, TC, Htil, diff)
    return value, caches


def _transition_closed_form(params, X, Mu, Ls):
    """Mean-path transition expectation, exact when the one-step mean does
    not depend on the previous hidden state (degenerate models)."""
    _, _, U4T, b4 = _group_arrays(params)
    W4 = params.W.reshape(4 * params.hidden, params.n_inputs)
    Zx = X @ W4.T + b4
    Hprev = np.concatenate([np.zeros((1,) + Mu.shape[1:]), Mu[:-1]], axis=0)
    _, _, _, _, _, _, Htil = _kernels.vi_forward_scan(Zx, U4T, Hprev)
    s2 = params.state_noise ** 2
    sig2q = np.exp(2.0 * Ls)
    diff = Mu - Htil
    value = float(
        -0.5 * Mu.size * (LOG_2PI + np.log(s2))
        - np.sum(diff * diff + sig2q) / (2.0 * s2)
    )
    return value


def _phi_for_sequence(vstate: VariationalState, seq: Sequence):
    if seq.seq_id not in vstate.mu:
        raise ValueError(f"no variational parameters for sequence {seq.seq_id!r}")
    return vstate.mu[seq.seq_id], vstate.log_sigma[seq.seq_id]


def elbo(params: LstmParams, vstate: VariationalState, seq: Sequence,
         spec: PenaltySpec, rng: Rng, n_mc: int = 1,
         transition: str = "sampled") -> ElboEstimate:
    """Penalized ELBO estimate for one sequence.

    Emission and entropy are closed-form; the transition term averages n_mc
    sampled paths (or uses the mean-path closed form when transition is
    "closed_form"). The penalty lam * Omega(theta) is subtracted in full.
    """
    _require_stochastic(params)
    X = seq.inputs[:, None, :]
    Y = seq.targets[:, None]
    if vstate.mode == "amortized":
        return _elbo_amortized(params, vstate, X, Y, spec, rng, n_mc)
    mu, ls = _phi_for_sequence(vstate, seq)
    Mu, Ls = mu[:, None, :], ls[:, None, :]
    emission, _, _ = _emission_terms(params, Y, Mu, Ls)
    entropy = _entropy_term(Ls)
    if transition == "closed_form":
        trans = _transition_closed_form(params, X, Mu, Ls)
    else:
        vals = []
        for _ in range(n_mc):
            eps = rng.standard_normal(Mu.shape)
            v, _ = _transition_sampled(params, X, Mu, Ls, eps)
            vals.append(v)
        trans = float(np.mean(vals))
    pen = spec.lam * penalty_value(spec, params)
    return ElboEstimate(
        value=emission + trans + entropy - pen,
        n_mc=n_mc, emission=emission, transition=trans,
        entropy=entropy, penalty=pen,
    )


def _group_elbo_and_grad(params, X, Y, Mu, Ls, eps, spec):
    """Single-sample unpenalized ELBO and ascent gradients for one group.

    Returns (value, theta grad vector, dMu, dLs). Penalty terms are added
    once at the dataset level by the callers, never per group.
    """
    hid = params.hidden
    lay = ParamLayout(params.n_inputs, hid)
    emission, resid, sig2q = _emission_terms(params, Y, Mu, Ls)
    entropy = _entropy_term(Ls)
    trans, caches = _transition_sampled(params, X, Mu, Ls, eps)
    Zx, sig, Hsamp, Hprev, I, F, O, G, C, TC, Htil, diff = caches
    s2 = params.state_noise ** 2
    sigma2 = params.sigma2
    wy = params.w_y

    delta = diff / s2
    U4 = params.U.reshape(4 * hid, hid)
    dZ, dHprev = _kernels.vi_backward_scan(delta, I, F, O, G, C, TC, U4)

    # theta gradients (ascent orientation)
    dW4 = np.tensordot(dZ, X, axes=([0, 1], [0, 1]))
    dU4 = np.tensordot(dZ, Hprev, axes=([0, 1], [0, 1]))
    db4 = dZ.sum(axis=(0, 1))
    rs = resid / sigma2
    dwy = (np.tensordot(rs, Mu, axes=([0, 1], [0, 1]))
           - wy * np.sum(sig2q, axis=(0, 1)) / sigma2)
    dby = float(np.sum(rs))
    drho = float(
        np.sum(-0.5 + resid * resid / (2.0 * sigma2))
        + np.sum(np.tensordot(sig2q, wy ** 2, axes=([2], [0])))
        / (2.0 * sigma2)
    )
    theta = np.zeros(lay.size)
    theta[lay.W] = dW4.ravel()
    theta[lay.U] = dU4.ravel()
    theta[lay.b] = db4
    theta[lay.w_y] = dwy
    theta[lay.b_y] = dby
    theta[lay.rho] = drho

    # phi gradients: sampled-state chain plus closed-form terms
    dHsamp = -delta
    dHsamp[:-1] += dHprev[1:]
    dMu = dHsamp + rs[:, :, None] * wy[None, None, :]
    dLs = (dHsamp * sig * eps
           - sig2q * (wy ** 2)[None, None, :] / sigma2
           + 1.0)
    value = emission + trans + entropy
    return value, theta, dMu, dLs


def elbo_grad(params: LstmParams, vstate: VariationalState, seq: Sequence,
              spec: PenaltySpec, rng: Rng, eps: np.ndarray | None = None):
    """Single-sample pathwise gradients of the penalized ELBO.

    Returns (theta gradient as a flat vector, (dmu, dlog_sigma)) in ascent
    orientation. Pass eps to freeze the noise (finite-difference tests);
    otherwise one sample is drawn from rng. The returned theta gradient
    includes the penalty subgradient for every family.
    """
    _require_stochastic(params)
    if vstate.mode == "amortized":
        raise ValueError("elbo_grad covers free-form states; amortized "
                         "gradients are internal to fit_vi")
    mu, ls = _phi_for_sequence(vstate, seq)
    X = seq.inputs[:, None, :]
    Y = seq.targets[:, None]
    Mu, Ls = mu[:, None, :], ls[:, None, :]
    if eps is None:
        eps = rng.standard_normal(Mu.shape)
    else:
        eps = np.asarray(eps, dtype=np.float64).reshape(Mu.shape)
    _, theta, dMu, dLs = _group_elbo_and_grad(params, X, Y, Mu, Ls, eps, spec)
    if spec.lam > 0.0 and spec.kind != "none":
        theta = theta - spec.lam * penalty_subgrad(spec, params)
    return theta, (dMu[:, 0, :], dLs[:, 0, :])


# ---------------------------------------------------------------------------
# Amortized mode


def _init_net(rng: Rng, width: int, n_inputs: int, hidden: int,
              state_noise: float) -> InferenceNet:
    n_in = n_inputs + hidden
    A1 = rng.standard_normal((width, n_in)) / np.sqrt(n_in)
    c1 = np.zeros(width)
    A2 = rng.standard_normal((2 * hidden, width)) / np.sqrt(width)
    c2 = np.zeros(2 * hidden)
    c2[hidden:] = np.log(state_noise)
    return InferenceNet(A1, c1, A2, c2)


def _amortized_scan(params, net, X, eps):
    """Sequential sampled scan through cell and inference net.

    Returns per-step arrays and caches needed for the backward pass.
    """
    T, N, p = X.shape
    hid = params.hidden
    W4, U4, U4T, b4 = _group_arrays(params)
    Zx = X @ W4.T + b4
    Mu = np.empty((T, N, hid))
    Ls = np.empty((T, N, hid))
    Hsamp = np.empty((T, N, hid))
    Htil = np.empty((T, N, hid))
    Uact = np.empty((T, N, net.A1.shape[0]))
    I = np.empty((T, N, hid))
    F = np.empty((T, N, hid))
    O = np.empty((T, N, hid))
    G = np.empty((T, N, hid))
    C = np.empty((T, N, hid))
    hprev = np.zeros((N, hid))
    cprev = np.zeros((N, hid))
    for t in range(T):
        z = Zx[t] + hprev @ U4T
        zi, zf, zo, zg = (z[:, :hid], z[:, hid:2 * hid],
                          z[:, 2 * hid:3 * hid], z[:, 3 * hid:])
        it = _sig_np(zi)
        ft = _sig_np(zf)
        ot = _sig_np(zo)
        gt = np.tanh(zg)
        ct = ft * cprev + it * gt
        ht = ot * np.tanh(ct)
        a = np.concatenate([X[t], ht], axis=1)
        u = np.tanh(a @ net.A1.T + net.c1)
        out = u @ net.A2.T + net.c2
        mu_t, ls_t = out[:, :hid], out[:, hid:]
        Mu[t], Ls[t] = mu_t, ls_t
        Hsamp[t] = mu_t + np.exp(ls_t) * eps[t]
        Htil[t], Uact[t] = ht, u
        I[t], F[t], O[t], G[t], C[t] = it, ft, ot, gt, ct
        hprev = Hsamp[t]
        cprev = ct
    return Mu, Ls, Hsamp, Htil, Uact, I, F, O, G, C


def _sig_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _elbo_amortized(params, vstate, X, Y, spec, rng, n_mc):
    vals = []
    em = tr = en = 0.0
    for _ in range(n_mc):
        eps = rng.standard_normal((X.shape[0], X.shape[1], params.hidden))
        Mu, Ls, Hsamp, Htil, _, _, _, _, _, _ = _amortized_scan(
            params, vstate.net, X, eps)
        emission, _, _ = _emission_terms(params, Y, Mu, Ls)
        entropy = _entropy_term(Ls)
        s2 = params.state_noise ** 2
        diff = Hsamp - Htil
        trans = float(-0.5 * diff.size * (LOG_2PI + np.log(s2))
                      - np.sum(diff * diff) / (2.0 * s2))
        em += emission / n_mc
        tr += trans / n_mc
        en += entropy / n_mc
        vals.append(emission + trans + entropy)
    pen = spec.lam * penalty_value(spec, params)
    return ElboEstimate(
        value=float(np.mean(vals)) - pen, n_mc=n_mc,
        emission=em, transition=tr, entropy=en, penalty=pen,
    )


def _amortized_grad(params, net, X, Y, eps, spec):
    """Single-sample unpenalized ELBO and ascent gradients, amortized mode.

    Backpropagates through the inference net, the sampled states, and the
    cell recursion jointly. Returns (value, dtheta vector, dnet vector).
    """
    T, N, p = X.shape
    hid = params.hidden
    lay = ParamLayout(p, hid)
    Mu, Ls, Hsamp, Htil, Uact, I, F, O, G, C = _amortized_scan(
        params, net, X, eps)
    sig = np.exp(Ls)
    sig2q = sig * sig
    sigma2 = params.sigma2
    wy = params.w_y
    s2 = params.state_noise ** 2

    emission, resid, _ = _emission_terms(params, Y, Mu, Ls)
    entropy = _entropy_term(Ls)
    diff = Hsamp - Htil
    trans = float(-0.5 * diff.size * (LOG_2PI + np.log(s2))
                  - np.sum(diff * diff) / (2.0 * s2))
    value = emission + trans + entropy

    rs = resid / sigma2
    delta = diff / s2
    U4 = params.U.reshape(4 * hid, hid)

    dA1 = np.zeros_like(net.A1)
    dc1 = np.zeros_like(net.c1)
    dA2 = np.zeros_like(net.A2)
    dc2 = np.zeros_like(net.c2)
    dW4 = np.zeros((4 * hid, p))
    dU4 = np.zeros((4 * hid, hid))
    db4 = np.zeros(4 * hid)

    dHsamp_carry = np.zeros((N, hid))
    dC_carry = np.zeros((N, hid))
    Hprev_rows = np.concatenate([np.zeros((1, N, hid)), Hsamp[:-1]], axis=0)
    for t in range(T - 1, -1, -1):
        dmu = rs[t][:, None] * wy[None, :]
        dls = -sig2q[t] * (wy ** 2)[None, :] / sigma2 + 1.0
        dhs = -delta[t] + dHsamp_carry
        dmu = dmu + dhs
        dls = dls + dhs * sig[t] * eps[t]
        dout = np.concatenate([dmu, dls], axis=1)
        dA2 += dout.T @ Uact[t]
        dc2 += dout.sum(axis=0)
        du = (dout @ net.A2) * (1.0 - Uact[t] ** 2)
        a = np.concatenate([X[t], Htil[t]], axis=1)
        dA1 += du.T @ a
        dc1 += du.sum(axis=0)
        da = du @ net.A1
        dhtil = da[:, p:] + delta[t]
        # cell backward
        tc = np.tanh(C[t])
        do = dhtil * tc
        dc = dC_carry + dhtil * O[t] * (1.0 - tc * tc)
        cprev = C[t - 1] if t > 0 else np.zeros((N, hid))
        di = dc * G[t]
        dg = dc * I[t]
        df = dc * cprev
        dz = np.concatenate(
            [di * I[t] * (1 - I[t]), df * F[t] * (1 - F[t]),
             do * O[t] * (1 - O[t]), dg * (1.0 - G[t] ** 2)], axis=1)
        dW4 += dz.T @ X[t]
        dU4 += dz.T @ Hprev_rows[t]
        db4 += dz.sum(axis=0)
        dHsamp_carry = dz @ U4
        dC_carry = dc * F[t]

    dwy = (np.tensordot(rs, Mu, axes=([0, 1], [0, 1]))
           - wy * np.sum(sig2q, axis=(0, 1)) / sigma2)
    dby = float(np.sum(rs))
    drho = float(
        np.sum(-0.5 + resid * resid / (2.0 * sigma2))
        + np.sum(np.tensordot(sig2q, wy ** 2, axes=([2], [0]))) / (2.0 * sigma2)
    )
    theta = np.zeros(lay.size)
    theta[lay.W] = dW4.ravel()
    theta[lay.U] = dU4.ravel()
    theta[lay.b] = db4
    theta[lay.w_y] = dwy
    theta[lay.b_y] = dby
    theta[lay.rho] = drho
    dnet = np.concatenate([dA1.ravel(), dc1, dA2.ravel(), dc2])
    return value, theta, dnet


# ---------------------------------------------------------------------------
# Fitting


def fit_vi(dataset: list[Sequence], spec: PenaltySpec, cfg: TrainConfig,
           seed: int, hidden: int, vi: ViConfig = ViConfig(),
           init: LstmParams | None = None, train_theta: bool = True,
           restarts: int | None = None):
    """Jointly maximize the penalized ELBO over theta and phi with Adam.

    Single-sample pathwise gradients per epoch; proximal step on theta for
    the l1 families. Returns (FitResult, VariationalState); the FitResult
    log-likelihood field holds a fixed-seed multi-sample ELBO of the final
    parameters (a lower bound on the log marginal likelihood, flagged by
    loglik_kind="elbo"), and df counts theta only.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    ids = [s.seq_id for s in dataset]
    if len(set(ids)) != len(ids):
        raise ValueError("sequence ids must be unique for variational fits")
    groups = group_by_length(dataset)
    n_inputs = dataset[0].n_inputs
    n_obs = total_steps(dataset)
    lay = ParamLayout(n_inputs, hidden)
    n_restarts = cfg.restarts if restarts is None else restarts

    best = None
    failures = []
    for r in range(n_restarts):
        rng = Rng(seed).child(r)
        try:
            out = _fit_vi_once(groups, spec, cfg, rng, lay, vi, init,
                               train_theta)
        except FitError as exc:
            failures.append(f"restart {r}: {exc}")
            continue
        if best is None or out[1] > best[1]:
            best = out
    if best is None:
        raise FitError("all restarts failed: " + "; ".join(failures))
    theta_vec, _, trace, phi_store, epochs, converged = best

    params = LstmParams.from_vector(theta_vec, n_inputs, hidden,
                                    state_noise=vi.state_noise)
    vstate = _phi_to_state(phi_store, groups, dataset, hidden, vi)
    eval_rng = Rng(seed).child(10_000_019)
    ll = _dataset_elbo(params, groups, phi_store, vi, eval_rng,
                       vi.eval_n_mc)
    df = count_df(params, spec)
    aic, bic = criteria_from(ll, df, n_obs)
    result = FitResult(
        params=params,
        objective_trace=np.asarray(trace),
        loglik=ll,
        df=df,
        aic=aic,
        bic=bic,
        n_obs=n_obs,
        seed=seed,
        epochs=epochs,
        converged=converged,
        loglik_kind="elbo",
        extra={"n_failed_restarts": len(failures)},
    )
    return result, vstate


def _fit_vi_once(groups, spec, cfg, rng, lay, vi, init, train_theta):
    hid = lay.hidden
    n_inputs = lay.n_inputs
    if init is not None:
        params0 = init.copy()
        params0.state_noise = vi.state_noise
    else:
        params0 = init_params(n_inputs, hid, rng, state_noise=vi.state_noise)
    theta = params0.to_vector()

    if vi.amortized:
        net = _init_net(rng, vi.net_width, n_inputs, hid, vi.state_noise)
        phi = [net.to_vector()]
    else:
        phi = []
        for X, _, _ in groups:
            T, N, _ = X.shape
            # start the variational means on the deterministic hidden
            # path of the initial weights; prior-width log scales
            mu = _batch_forward(params0, X).H.copy()
            ls = np.full((T, N, hid), np.log(vi.state_noise))
            phi.append((mu, ls))

    joint = _pack(theta, phi, vi)
    adam = _Adam(joint.size, cfg.learning_rate)
    trace = []
    calm = 0
    converged = False
    smooth = None
    epochs = 0
    for epoch in range(cfg.max_epochs):
        theta, phi = _unpack(joint, lay, groups, vi)
        try:
            params = LstmParams.from_vector(theta, n_inputs, hid,
                                            state_noise=vi.state_noise)
        except ValueError as exc:
            # exploded theta fails the params constructor; count the
            # restart as diverged
            raise FitError(str(exc)) from exc
        total = 0.0
        grad = np.zeros_like(joint)
        off = lay.size
        if vi.amortized:
            net = InferenceNet.from_vector(phi[0], vi.net_width,
                                           n_inputs + hid, hid)
            gnet = np.zeros_like(phi[0])
            gtheta = np.zeros(lay.size)
            for X, Y, _ in groups:
                eps = rng.standard_normal((X.shape[0], X.shape[1], hid))
                v, dth, dnet = _amortized_grad(params, net, X, Y, eps, spec)
                total += v
                gtheta += dth
                gnet += dnet
            grad[off:off + gnet.size] = gnet
        else:
            gtheta = np.zeros(lay.size)
            for gi, (X, Y, _) in enumerate(groups):
                Mu, Ls = phi[gi]
                eps = rng.standard_normal(Mu.shape)
                v, dth, dMu, dLs = _group_elbo_and_grad(
                    params, X, Y, Mu, Ls, eps, spec)
                total += v
                gtheta += dth
                half = Mu.size
                grad[off:off + half] = dMu.ravel()
                grad[off + half:off + 2 * half] = dLs.ravel()
                off += 2 * half
        total -= spec.lam * penalty_value(spec, params)
        if spec.kind == "ridge" and spec.lam > 0.0:
            gtheta = gtheta - spec.lam * penalty_subgrad(spec, params)
        grad[:lay.size] = gtheta
        if not np.isfinite(total) or not np.all(np.isfinite(grad)):
            raise FitError("non-finite ELBO during variational fit")
        obj = -total
        trace.append(obj)
        evaluated = joint.copy()  # the state trace[-1] was computed at
        epochs = epoch + 1
        prev_smooth = smooth
        smooth = obj if smooth is None else 0.9 * smooth + 0.1 * obj
        if prev_smooth is not None:
            rel = abs(smooth - prev_smooth) / max(1.0, abs(prev_smooth))
            calm = calm + 1 if rel < cfg.tol else 0
            if calm >= cfg.patience:
                converged = True
                break
        if not train_theta:
            grad[:lay.size] = 0.0
        g = clip_gradient(-grad, cfg.clip_norm)
        adam.step(joint, g)
        if train_theta:
            th = joint[:lay.size]
            prox_vector(spec, th, lay, adam.lr)
            joint[:lay.size] = th
    # return the last evaluated state so the reported bound matches it
    # (the final Adam step would otherwise be one unevaluated update ahead)
    theta, phi = _unpack(evaluated, lay, groups, vi)
    return theta, -trace[-1], trace, phi, epochs, converged


def _pack(theta, phi, vi):
    parts = [theta]
    if vi.amortized:
        parts.append(phi[0])
    else:
        for mu, ls in phi:
            parts.append(mu.ravel())
            parts.append(ls.ravel())
    return np.concatenate(parts)


def _unpack(joint, lay, groups, vi):
    theta = joint[:lay.size].copy()
    off = lay.size
    if vi.amortized:
        return theta, [joint[off:].copy()]
    phi = []
    hid = lay.hidden
    for X, _, _ in groups:
        T, N, _ = X.shape
        half = T * N * hid
        mu = joint[off:off + half].reshape(T, N, hid).copy()
        ls = joint[off + half:off + 2 * half].reshape(T, N, hid).copy()
        phi.append((mu, ls))
        off += 2 * half
    return theta, phi


def _phi_to_state(phi, groups, dataset, hidden, vi):
    if vi.amortized:
        net = InferenceNet.from_vector(
            phi[0], vi.net_width, dataset[0].n_inputs + hidden, hidden)
        return VariationalState(mode="amortized", hidden=hidden, net=net)
    state = VariationalState(mode="free_form", hidden=hidden)
    for gi, (_, _, idx) in enumerate(groups):
        mu, ls = phi[gi]
        for col, k in enumerate(idx):
            sid = dataset[k].seq_id
            state.mu[sid] = mu[:, col, :].copy()
            state.log_sigma[sid] = ls[:, col, :].copy()
    return state


def _dataset_elbo(params, groups, phi, vi, rng, n_mc):
    """Unpenalized multi-sample ELBO of the whole dataset (deterministic
    given the rng stream); used as the reported likelihood bound. With
    vi.transition == "closed_form" the free-form transition term is the
    mean-path expectation instead of a Monte Carlo average."""
    total = 0.0
    if vi.amortized:
        net = InferenceNet.from_vector(
            phi[0], vi.net_width, params.n_inputs + params.hidden,
            params.hidden)
        for X, Y, _ in groups:
            vals = []
            for _ in range(n_mc):
                eps = rng.standard_normal((X.shape[0], X.shape[1],
                                           params.hidden))
                Mu, Ls, Hsamp, Htil, _, _, _, _, _, _ = _amortized_scan(
                    params, net, X, eps)
                emission, _, _ = _emission_terms(params, Y, Mu, Ls)
                entropy = _entropy_term(Ls)
                s2 = params.state_noise ** 2
                diff = Hsamp - Htil
                trans = float(-0.5 * diff.size * (LOG_2PI + np.log(s2))
                              - np.sum(diff * diff) / (2.0 * s2))
                vals.append(emission + trans + entropy)
            total += float(np.mean(vals))
        return total
    for gi, (X, Y, _) in enumerate(groups):
        Mu, Ls = phi[gi]
        emission, _, _ = _emission_terms(params, Y, Mu, Ls)
        entropy = _entropy_term(Ls)
        if vi.transition == "closed_form":
            trans = _transition_closed_form(params, X, Mu, Ls)
        else:
            vals = []
            for _ in range(n_mc):
                eps = rng.standard_normal(Mu.shape)
                v, _ = _transition_sampled(params, X, Mu, Ls, eps)
                vals.append(v)
            trans = float(np.mean(vals))
        total += emission + entropy + trans
    return total
