"""LSTM cell, forward pass, exact Gaussian likelihood, and manual BPTT.

The network is a single-layer LSTM with a linear Gaussian emission on the
hidden state. Gate blocks are ordered (input, forget, output, candidate)
throughout. Initial hidden and cell states are zero vectors. The public
single-sequence functions here are plain numpy reference implementations;
batched training paths use the compiled scans in _kernels and are tested
against these references.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .numerics import Rng, check_array, stable_sigmoid

GATES = ("input", "forget", "output", "candidate")


@dataclass
class LstmParams:
    """All parameters of the model.

    W: (4, H, p) input weights per gate; U: (4, H, H) recurrent weights;
    b: (4, H) gate biases; w_y/b_y: emission weights and intercept;
    sigma2: emission noise variance; state_noise: scale s of the additive
    Gaussian hidden-state noise (0 gives the deterministic network).
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    w_y: np.ndarray
    b_y: float
    sigma2: float
    state_noise: float = 0.0

    def __post_init__(self):
        self.W = check_array(self.W, "W", ndim=3)
        self.U = check_array(self.U, "U", ndim=3)
        self.b = check_array(self.b, "b", ndim=2)
        self.w_y = check_array(self.w_y, "w_y", ndim=1)
        self.b_y = float(self.b_y)
        self.sigma2 = float(self.sigma2)
        self.state_noise = float(self.state_noise)
        hidden = self.W.shape[1]
        if self.W.shape[0] != 4 or self.U.shape != (4, hidden, hidden):
            raise ValueError("W must be (4, H, p) and U (4, H, H)")
        if self.b.shape != (4, hidden) or self.w_y.shape != (hidden,):
            raise ValueError("b must be (4, H) and w_y (H,)")
        if not np.isfinite(self.b_y):
            raise ValueError("b_y must be finite")
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0.0):
            raise ValueError("sigma2 must be finite and positive")
        if not (np.isfinite(self.state_noise) and self.state_noise >= 0.0):
            raise ValueError("state_noise must be finite and non-negative")

    @property
    def n_inputs(self) -> int:
        return self.W.shape[2]

    @property
    def hidden(self) -> int:
        return self.W.shape[1]

    @property
    def n_params(self) -> int:
        """Length of the flat parameter vector (includes log sigma2)."""
        p, hid = self.n_inputs, self.hidden
        return 4 * hid * p + 4 * hid * hid + 4 * hid + hid + 2

    def to_vector(self) -> np.ndarray:
        """Flatten to [W, U, b, w_y, b_y, log sigma2]."""
        return np.concatenate(
            [
                self.W.ravel(),
                self.U.ravel(),
                self.b.ravel(),
                self.w_y,
                [self.b_y, np.log(self.sigma2)],
            ]
        )

    @staticmethod
    def from_vector(vec: np.ndarray, n_inputs: int, hidden: int,
                    state_noise: float = 0.0) -> "LstmParams":
        vec = np.asarray(vec, dtype=np.float64)
        lay = ParamLayout(n_inputs, hidden)
        if vec.shape != (lay.size,):
            raise ValueError(f"expected vector of length {lay.size}")
        # an overflowing exp yields inf, which the constructor rejects;
        # skip the warning and let that validation speak
        with np.errstate(over="ignore"):
            noise_var = float(np.exp(vec[lay.rho]))
        return LstmParams(
            W=vec[lay.W].reshape(4, hidden, n_inputs).copy(),
            U=vec[lay.U].reshape(4, hidden, hidden).copy(),
            b=vec[lay.b].reshape(4, hidden).copy(),
            w_y=vec[lay.w_y].copy(),
            b_y=float(vec[lay.b_y]),
            sigma2=noise_var,
            state_noise=state_noise,
        )

    def copy(self) -> "LstmParams":
        return LstmParams(
            self.W.copy(), self.U.copy(), self.b.copy(), self.w_y.copy(),
            self.b_y, self.sigma2, self.state_noise,
        )


class ParamLayout:
    """Index slices of the flat parameter vector for a (p, H) model."""

    def __init__(self, n_inputs: int, hidden: int):
        p, hid = int(n_inputs), int(hidden)
        self.n_inputs = p
        self.hidden = hid
        nW, nU, nb = 4 * hid * p, 4 * hid * hid, 4 * hid
        self.W = slice(0, nW)
        self.U = slice(nW, nW + nU)
        self.b = slice(nW + nU, nW + nU + nb)
        self.w_y = slice(nW + nU + nb, nW + nU + nb + hid)
        self.b_y = nW + nU + nb + hid
        self.rho = self.b_y + 1
        self.size = self.rho + 1

    def gate_W(self, g: int) -> slice:
        step = self.hidden * self.n_inputs
        return slice(g * step, (g + 1) * step)

    def gate_U(self, g: int) -> slice:
        base = self.U.start
        step = self.hidden * self.hidden
        return slice(base + g * step, base + (g + 1) * step)

    def gate_b(self, g: int) -> slice:
        base = self.b.start
        return slice(base + g * self.hidden, base + (g + 1) * self.hidden)


@dataclass
class ParamGrads:
    """Gradient container mirroring LstmParams (sigma2 via log sigma2)."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    w_y: np.ndarray
    b_y: float
    log_sigma2: float

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.W.ravel(),
                self.U.ravel(),
                self.b.ravel(),
                self.w_y,
                [self.b_y, self.log_sigma2],
            ]
        )


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray

    @staticmethod
    def zeros(hidden: int) -> "CellState":
        return CellState(h=np.zeros(hidden), c=np.zeros(hidden))


@dataclass
class Sequence:
    """One observed sequence: inputs (T, p) and scalar targets (T,)."""

    inputs: np.ndarray
    targets: np.ndarray
    seq_id: str = "0"

    def __post_init__(self):
        self.inputs = check_array(self.inputs, "inputs", ndim=2)
        self.targets = check_array(self.targets, "targets", ndim=1)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets disagree on sequence length")
        if self.inputs.shape[0] < 1:
            raise ValueError("sequence must contain at least one step")
        self.seq_id = str(self.seq_id)

    @property
    def length(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[1]


@dataclass
class GateActivations:
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray


@dataclass
class ForwardTrace:
    """Stored activations of one deterministic forward pass."""

    gates: GateActivations
    c: np.ndarray
    h: np.ndarray
    y_hat: np.ndarray


def init_params(n_inputs: int, hidden: int, rng: Rng, sigma2: float = 1.0,
                state_noise: float = 0.0) -> LstmParams:
    """Fan-in scaled Gaussian initialization.

    Weights are N(0, 1/fan_in); biases start at zero except the forget gate
    bias, which starts at one so early gradients are not gated away.
    """
    if n_inputs < 1 or hidden < 1:
        raise ValueError("n_inputs and hidden must be positive")
    W = rng.standard_normal((4, hidden, n_inputs)) / np.sqrt(n_inputs)
    U = rng.standard_normal((4, hidden, hidden)) / np.sqrt(hidden)
    b = np.zeros((4, hidden))
    b[1, :] = 1.0
    w_y = rng.standard_normal(hidden) / np.sqrt(hidden)
    return LstmParams(W, U, b, w_y, 0.0, sigma2, state_noise)


def cell_step(params: LstmParams, state: CellState, x: np.ndarray):
    """One deterministic cell update. Returns (new state, gate activations)."""
    x = check_array(x, "x", ndim=1)
    z = params.W @ x + params.U @ state.h + params.b
    i = stable_sigmoid(z[0])
    f = stable_sigmoid(z[1])
    o = stable_sigmoid(z[2])
    g = np.tanh(z[3])
    c = f * state.c + i * g
    h = o * np.tanh(c)
    return CellState(h=h, c=c), GateActivations(i=i, f=f, o=o, g=g)


def stochastic_step(params: LstmParams, state: CellState, x: np.ndarray,
                    eta: np.ndarray) -> CellState:
    """Cell update with additive hidden-state noise h = h_det + s * eta.

    The cell state is the deterministic update driven by the (noisy)
    previous hidden state; noise enters the hidden state only.
    """
    new, _ = cell_step(params, state, x)
    eta = check_array(eta, "eta", ndim=1)
    return CellState(h=new.h + params.state_noise * eta, c=new.c)


def forward(params: LstmParams, seq, state0: CellState | None = None) -> ForwardTrace:
    """Deterministic forward pass storing every activation.

    Accepts a Sequence or a bare (T, p) input matrix.
    """
    if isinstance(seq, np.ndarray):
        seq = Sequence(inputs=seq, targets=np.zeros(seq.shape[0]),
                       seq_id="_inline")
    if seq.n_inputs != params.n_inputs:
        raise ValueError("sequence input width does not match parameters")
    T, hid = seq.length, params.hidden
    state = state0 if state0 is not None else CellState(np.zeros(hid), np.zeros(hid))
    gi = np.empty((T, hid))
    gf = np.empty((T, hid))
    go = np.empty((T, hid))
    gg = np.empty((T, hid))
    cs = np.empty((T, hid))
    hs = np.empty((T, hid))
    for t in range(T):
        state, gates = cell_step(params, state, seq.inputs[t])
        gi[t], gf[t], go[t], gg[t] = gates.i, gates.f, gates.o, gates.g
        cs[t], hs[t] = state.c, state.h
    y_hat = hs @ params.w_y + params.b_y
    return ForwardTrace(GateActivations(gi, gf, go, gg), cs, hs, y_hat)


def log_likelihood(params: LstmParams, seq: Sequence) -> float:
    """Exact Gaussian log-likelihood of the deterministic network.

    Undefined when state_noise > 0 (the likelihood is then an integral);
    raises ValueError in that case.
    """
    if params.state_noise > 0.0:
        raise ValueError(
            "exact log-likelihood is undefined for state_noise > 0; "
            "use a marginal-likelihood estimator"
        )
    trace = forward(params, seq)
    r = seq.targets - trace.y_hat
    T = seq.length
    return float(-0.5 * T * np.log(2.0 * np.pi * params.sigma2)
                 - 0.5 * np.sum(r * r) / params.sigma2)


def backward(params: LstmParams, seq: Sequence, trace: ForwardTrace) -> ParamGrads:
    """Gradient of the sequence log-likelihood w.r.t. every parameter.

    Full backpropagation through time; sigma2 is differentiated through
    rho = log sigma2. Validated against central differences in the tests.
    """
    X = seq.inputs[:, None, :]
    Y = seq.targets[:, None]
    stacked = _StackedTrace(
        I=trace.gates.i[:, None, :],
        F=trace.gates.f[:, None, :],
        O=trace.gates.o[:, None, :],
        G=trace.gates.g[:, None, :],
        C=trace.c[:, None, :],
        TC=np.tanh(trace.c)[:, None, :],
        H=trace.h[:, None, :],
        y_hat=trace.y_hat[:, None],
    )
    grads, _ = _batch_backward_nll(params, X, Y, stacked)
    return ParamGrads(
        W=-grads.W, U=-grads.U, b=-grads.b, w_y=-grads.w_y,
        b_y=-grads.b_y, log_sigma2=-grads.log_sigma2,
    )


@dataclass
class _StackedTrace:
    """Batched activations, time-major (T, N, H)."""

    I: np.ndarray
    F: np.ndarray
    O: np.ndarray
    G: np.ndarray
    C: np.ndarray
    TC: np.ndarray
    H: np.ndarray
    y_hat: np.ndarray
    mask: np.ndarray | None = None


def _batch_forward(params: LstmParams, X: np.ndarray,
                   mask: np.ndarray | None = None) -> _StackedTrace:
    """Batched forward pass via the compiled scan. X is (T, N, p)."""
    T, N, _ = X.shape
    hid = params.hidden
    W4 = params.W.reshape(4 * hid, params.n_inputs)
    U4T = np.ascontiguousarray(params.U.reshape(4 * hid, hid).T)
    b4 = params.b.reshape(4 * hid)
    Zx = X @ W4.T + b4
    m = mask if mask is not None else np.ones((T, N, hid))
    I, F, O, G, C, TC, Hs = _kernels.lstm_forward_scan(Zx, U4T, m)
    y_hat = Hs @ params.w_y + params.b_y
    return _StackedTrace(I, F, O, G, C, TC, Hs, y_hat, mask)


def _batch_nll(params: LstmParams, trace: _StackedTrace, Y: np.ndarray) -> float:
    r = trace.y_hat - Y
    n_obs = Y.size
    return float(0.5 * n_obs * np.log(2.0 * np.pi * params.sigma2)
                 + 0.5 * np.sum(r * r) / params.sigma2)


def _batch_backward_nll(params: LstmParams, X: np.ndarray, Y: np.ndarray,
                        trace: _StackedTrace,
                        dh_extra: np.ndarray | None = None):
    """Gradients of the batched negative log-likelihood.

    dh_extra, when given, is an additional direct gradient into the emitted
    hidden states (used for the hidden-activation penalty). Returns
    (ParamGrads in minimization orientation, residual array).
    """
    T, N, hid = trace.H.shape
    r = (trace.y_hat - Y) / params.sigma2
    dh_ext = r[:, :, None] * params.w_y[None, None, :]
    if dh_extra is not None:
        dh_ext = dh_ext + dh_extra
    mask = trace.mask if trace.mask is not None else np.ones((T, N, hid))
    U4 = params.U.reshape(4 * hid, hid)
    dZ = _kernels.lstm_backward_scan(
        dh_ext, trace.I, trace.F, trace.O, trace.G, trace.C, trace.TC,
        mask, U4,
    )
    Hprev = np.concatenate([np.zeros((1, N, hid)), trace.H[:-1]], axis=0)
    dW4 = np.tensordot(dZ, X, axes=([0, 1], [0, 1]))
    dU4 = np.tensordot(dZ, Hprev, axes=([0, 1], [0, 1]))
    db4 = dZ.sum(axis=(0, 1))
    dw_y = np.tensordot(r, trace.H, axes=([0, 1], [0, 1]))
    db_y = float(r.sum())
    resid = trace.y_hat - Y
    d_rho = float(np.sum(0.5 - resid * resid / (2.0 * params.sigma2)))
    grads = ParamGrads(
        W=dW4.reshape(4, hid, params.n_inputs),
        U=dU4.reshape(4, hid, hid),
        b=db4.reshape(4, hid),
        w_y=dw_y,
        b_y=db_y,
        log_sigma2=d_rho,
    )
    return grads, resid


def group_by_length(seqs: list[Sequence]):
    """Pack sequences into equal-length groups as time-major arrays.

    Returns a list of (X (T,N,p), Y (T,N), indices) in deterministic order
    (ascending length, original order within a group).
    """
    if not seqs:
        raise ValueError("dataset must contain at least one sequence")
    p = seqs[0].n_inputs
    for s in seqs:
        if s.n_inputs != p:
            raise ValueError("all sequences must share the input width")
    by_len: dict[int, list[int]] = {}
    for k, s in enumerate(seqs):
        by_len.setdefault(s.length, []).append(k)
    groups = []
    for T in sorted(by_len):
        idx = by_len[T]
        X = np.stack([seqs[k].inputs for k in idx], axis=1)
        Y = np.stack([seqs[k].targets for k in idx], axis=1)
        groups.append((X, Y, idx))
    return groups


def total_steps(seqs: list[Sequence]) -> int:
    """Pooled scalar observation count across a dataset."""
    return int(sum(s.length for s in seqs))


def dataset_log_likelihood(params: LstmParams, seqs: list[Sequence]) -> float:
    """Exact log-likelihood summed over a dataset (state_noise must be 0)."""
    if params.state_noise > 0.0:
        raise ValueError(
            "exact log-likelihood is undefined for state_noise > 0"
        )
    total = 0.0
    for X, Y, _ in group_by_length(seqs):
        trace = _batch_forward(params, X)
        total -= _batch_nll(params, trace, Y)
    return float(total)


def predict(params: LstmParams, seqs: list[Sequence]) -> list[np.ndarray]:
    """Deterministic one-step predictions for each sequence."""
    out: list[np.ndarray | None] = [None] * len(seqs)
    for X, Y, idx in group_by_length(seqs):
        trace = _batch_forward(params, X)
        for col, k in enumerate(idx):
            out[k] = trace.y_hat[:, col].copy()
    return out  # type: ignore[return-value]


def predict_inputs(params: LstmParams, inputs: np.ndarray) -> np.ndarray:
    """Predictions for one bare (T, p) input matrix."""
    inputs = check_array(inputs, "inputs", ndim=2)
    trace = _batch_forward(params, inputs[:, None, :])
    return trace.y_hat[:, 0].copy()
