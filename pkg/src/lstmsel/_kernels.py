"""Compiled kernels for the sequential scans.

Everything here is a hot loop that cannot be expressed as one batched numpy
call because of the time recursion. Kernels are compiled without fastmath so
results are bit-stable, and they operate on time-major float64 arrays
(T, N, ...) where N indexes sequences of equal length.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _sig(x):
    if x >= 0.0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def lstm_forward_scan(Zx, U4T, mask):
    """Deterministic LSTM scan over a batch of equally long sequences.

    Zx holds the input-side pre-activations X @ W^T + b, laid out (T, N, 4H)
    with gate blocks ordered input, forget, output, candidate. U4T is the
    recurrent weight matrix transposed to (H, 4H). mask is the (inverted)
    dropout mask applied to the emitted hidden state; pass ones when off.
    Initial hidden and cell states are zero.
    """
    T, N, H4 = Zx.shape
    H = H4 // 4
    I = np.empty((T, N, H))
    F = np.empty((T, N, H))
    O = np.empty((T, N, H))
    G = np.empty((T, N, H))
    C = np.empty((T, N, H))
    TC = np.empty((T, N, H))
    Hs = np.empty((T, N, H))
    hprev = np.zeros((N, H))
    cprev = np.zeros((N, H))
    for t in range(T):
        z = Zx[t] + np.dot(hprev, U4T)
        for n in range(N):
            for j in range(H):
                i_ = _sig(z[n, j])
                f_ = _sig(z[n, H + j])
                o_ = _sig(z[n, 2 * H + j])
                g_ = np.tanh(z[n, 3 * H + j])
                c_ = f_ * cprev[n, j] + i_ * g_
                tc = np.tanh(c_)
                I[t, n, j] = i_
                F[t, n, j] = f_
                O[t, n, j] = o_
                G[t, n, j] = g_
                C[t, n, j] = c_
                TC[t, n, j] = tc
                Hs[t, n, j] = o_ * tc * mask[t, n, j]
        hprev = Hs[t]
        cprev = C[t]
    return I, F, O, G, C, TC, Hs


@njit(cache=True)
def lstm_backward_scan(dh_ext, I, F, O, G, C, TC, mask, U4):
    """Reverse-mode scan matching lstm_forward_scan.

    dh_ext is the direct loss gradient into the emitted hidden state at each
    step (emission term plus any activation penalty). Returns the gradient
    dZ into the gate pre-activations, from which all weight gradients follow
    by matmuls outside the kernel.
    """
    T, N, H = dh_ext.shape
    dZ = np.empty((T, N, 4 * H))
    dHnext = np.zeros((N, H))
    dCnext = np.zeros((N, H))
    for t in range(T - 1, -1, -1):
        for n in range(N):
            for j in range(H):
                dhs = dh_ext[t, n, j] + dHnext[n, j]
                dhraw = dhs * mask[t, n, j]
                tc = TC[t, n, j]
                o = O[t, n, j]
                do = dhraw * tc
                dc = dCnext[n, j] + dhraw * o * (1.0 - tc * tc)
                i_ = I[t, n, j]
                f_ = F[t, n, j]
                g_ = G[t, n, j]
                if t > 0:
                    cp = C[t - 1, n, j]
                else:
                    cp = 0.0
                di = dc * g_
                dg = dc * i_
                df = dc * cp
                dZ[t, n, j] = di * i_ * (1.0 - i_)
                dZ[t, n, H + j] = df * f_ * (1.0 - f_)
                dZ[t, n, 2 * H + j] = do * o * (1.0 - o)
                dZ[t, n, 3 * H + j] = dg * (1.0 - g_ * g_)
                dCnext[n, j] = dc * f_
        dHnext = np.dot(dZ[t], U4)
    return dZ


@njit(cache=True)
def vi_forward_scan(Zx, U4T, Hprev):
    """Cell scan along an externally supplied hidden-state path.

    Hprev[t] is the (sampled) hidden state fed to the gates at step t, so
    only the cell chain is recurrent. Returns the gate activations, the cell
    path, and the deterministic one-step means O * tanh(C).
    """
    T, N, H4 = Zx.shape
    H = H4 // 4
    I = np.empty((T, N, H))
    F = np.empty((T, N, H))
    O = np.empty((T, N, H))
    G = np.empty((T, N, H))
    C = np.empty((T, N, H))
    TC = np.empty((T, N, H))
    Htil = np.empty((T, N, H))
    cprev = np.zeros((N, H))
    for t in range(T):
        z = Zx[t] + np.dot(Hprev[t], U4T)
        for n in range(N):
            for j in range(H):
                i_ = _sig(z[n, j])
                f_ = _sig(z[n, H + j])
                o_ = _sig(z[n, 2 * H + j])
                g_ = np.tanh(z[n, 3 * H + j])
                c_ = f_ * cprev[n, j] + i_ * g_
                tc = np.tanh(c_)
                I[t, n, j] = i_
                F[t, n, j] = f_
                O[t, n, j] = o_
                G[t, n, j] = g_
                C[t, n, j] = c_
                TC[t, n, j] = tc
                Htil[t, n, j] = o_ * tc
        cprev = C[t]
    return I, F, O, G, C, TC, Htil


@njit(cache=True)
def vi_backward_scan(dHtil, I, F, O, G, C, TC, U4):
    """Reverse-mode scan matching vi_forward_scan.

    dHtil is the loss gradient into the one-step means. Returns dZ into the
    gate pre-activations and dHprev, the gradient into the supplied hidden
    path at each step (the only recurrent carry is the cell chain).
    """
    T, N, H = dHtil.shape
    dZ = np.empty((T, N, 4 * H))
    dHprev = np.empty((T, N, H))
    dCnext = np.zeros((N, H))
    for t in range(T - 1, -1, -1):
        for n in range(N):
            for j in range(H):
                dht = dHtil[t, n, j]
                tc = TC[t, n, j]
                o = O[t, n, j]
                do = dht * tc
                dc = dCnext[n, j] + dht * o * (1.0 - tc * tc)
                i_ = I[t, n, j]
                f_ = F[t, n, j]
                g_ = G[t, n, j]
                if t > 0:
                    cp = C[t - 1, n, j]
                else:
                    cp = 0.0
                di = dc * g_
                dg = dc * i_
                df = dc * cp
                dZ[t, n, j] = di * i_ * (1.0 - i_)
                dZ[t, n, H + j] = df * f_ * (1.0 - f_)
                dZ[t, n, 2 * H + j] = do * o * (1.0 - o)
                dZ[t, n, 3 * H + j] = dg * (1.0 - g_ * g_)
                dCnext[n, j] = dc * f_
        dHprev[t] = np.dot(dZ[t], U4)
    return dZ, dHprev


@njit(cache=True)
def aghq_filter_scan(Zx, U4T, wy, by, sigma2, s, Y, nodes, logw, use_quad):
    """Per-step one-dimensional marginal-likelihood filter.

    At each step the hidden state is reduced to the scalar u = wy . h along
    the emission direction; the prior of u is Gaussian, the posterior mode
    and curvature are found in closed form, and the step marginal is the
    K-point adaptive quadrature sum (or the exact Gaussian convolution when
    use_quad is False). The plug-in filtered state propagates to the next
    step. Returns (logmarg per sequence, per-step logmarg, modes, scales,
    filtered states).
    """
    T, N, H4 = Zx.shape
    H = H4 // 4
    K = nodes.shape[0]
    LOG2PI = np.log(2.0 * np.pi)
    SQRT2 = np.sqrt(2.0)
    wnorm2 = 0.0
    for j in range(H):
        wnorm2 += wy[j] * wy[j]
    logmarg = np.zeros(N)
    steplm = np.empty((T, N))
    Uhat = np.zeros((T, N))
    Scale = np.zeros((T, N))
    Hhat = np.empty((T, N, H))
    hprev = np.zeros((N, H))
    cprev = np.zeros((N, H))
    cnew = np.empty((N, H))
    htil = np.empty(H)
    vals = np.empty(K)
    for t in range(T):
        z = Zx[t] + np.dot(hprev, U4T)
        for n in range(N):
            mu_u = 0.0
            for j in range(H):
                i_ = _sig(z[n, j])
                f_ = _sig(z[n, H + j])
                o_ = _sig(z[n, 2 * H + j])
                g_ = np.tanh(z[n, 3 * H + j])
                c_ = f_ * cprev[n, j] + i_ * g_
                cnew[n, j] = c_
                htil[j] = o_ * np.tanh(c_)
                mu_u += wy[j] * htil[j]
            y = Y[t, n]
            if wnorm2 == 0.0:
                lm = -0.5 * (LOG2PI + np.log(sigma2)) - (y - by) ** 2 / (2.0 * sigma2)
                for j in range(H):
                    Hhat[t, n, j] = htil[j]
            else:
                v_u = s * s * wnorm2
                prec = 1.0 / sigma2 + 1.0 / v_u
                st = 1.0 / np.sqrt(prec)
                uhat = (st * st) * ((y - by) / sigma2 + mu_u / v_u)
                if use_quad:
                    hi = -np.inf
                    for k in range(K):
                        u = uhat + SQRT2 * st * nodes[k]
                        li = (
                            -0.5 * (LOG2PI + np.log(sigma2))
                            - (y - by - u) ** 2 / (2.0 * sigma2)
                            - 0.5 * (LOG2PI + np.log(v_u))
                            - (u - mu_u) ** 2 / (2.0 * v_u)
                        )
                        vals[k] = logw[k] + nodes[k] * nodes[k] + li
                        if vals[k] > hi:
                            hi = vals[k]
                    acc = 0.0
                    for k in range(K):
                        acc += np.exp(vals[k] - hi)
                    lm = hi + np.log(acc) + np.log(SQRT2 * st)
                else:
                    vtot = sigma2 + v_u
                    lm = -0.5 * (LOG2PI + np.log(vtot)) - (y - by - mu_u) ** 2 / (2.0 * vtot)
                coef = (uhat - mu_u) / wnorm2
                for j in range(H):
                    Hhat[t, n, j] = htil[j] + wy[j] * coef
                Uhat[t, n] = uhat
                Scale[t, n] = st
            logmarg[n] += lm
            steplm[t, n] = lm
        hprev = Hhat[t]
        tmp = cprev
        cprev = cnew
        cnew = tmp
    return logmarg, steplm, Uhat, Scale, Hhat
