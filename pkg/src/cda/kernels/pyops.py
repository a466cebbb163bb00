"""Pure-numpy implementations of the hot kernels.

Reference backend for the compiled extension in ``_cyops.pyx``; both expose
the same signatures on C-contiguous float64 arrays. The gated recurrent cell
uses a [reset | update | candidate] gate layout. Banded attention lanes map
lane j at position t to source position t - w + 1 + j; lanes reaching before
the sequence start are invalid and carry exact zeros.
"""

import numpy as np


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -40.0, 40.0)))


def gru_forward(x, wx, wh, b, h0):
    """Run the gated cell over a full sequence.

    x: (B, T, d_in); wx: (d_in, 3*dh); wh: (dh, 3*dh); b: (3*dh,); h0: (B, dh).
    Returns (H, R, U, C) each of shape (B, T, dh).
    """
    B, T, _ = x.shape
    dh = wh.shape[0]
    gx = x.reshape(B * T, -1) @ wx + b
    gx = gx.reshape(B, T, 3 * dh)
    H = np.empty((B, T, dh))
    R = np.empty((B, T, dh))
    U = np.empty((B, T, dh))
    C = np.empty((B, T, dh))
    wh_ru = wh[:, : 2 * dh]
    wh_c = wh[:, 2 * dh :]
    h = h0
    for t in range(T):
        gh_ru = h @ wh_ru
        r = _sigmoid(gx[:, t, :dh] + gh_ru[:, :dh])
        u = _sigmoid(gx[:, t, dh : 2 * dh] + gh_ru[:, dh:])
        c = np.tanh(gx[:, t, 2 * dh :] + (r * h) @ wh_c)
        h = (1.0 - u) * h + u * c
        R[:, t] = r
        U[:, t] = u
        C[:, t] = c
        H[:, t] = h
    return H, R, U, C


def gru_backward(x, wx, wh, h0, H, R, U, C, dH):
    """Backprop through time for :func:`gru_forward`."""
    B, T, d_in = x.shape
    dh = wh.shape[0]
    wh_r = wh[:, :dh]
    wh_u = wh[:, dh : 2 * dh]
    wh_c = wh[:, 2 * dh :]
    dgates = np.empty((B, T, 3 * dh))
    dwh = np.zeros_like(wh)
    carry = np.zeros((B, dh))
    for t in range(T - 1, -1, -1):
        h_prev = H[:, t - 1] if t > 0 else h0
        r, u, c = R[:, t], U[:, t], C[:, t]
        d = dH[:, t] + carry
        du = d * (c - h_prev)
        dc = d * u
        dhp = d * (1.0 - u)
        dc_pre = dc * (1.0 - c * c)
        drh = dc_pre @ wh_c.T
        dr = drh * h_prev
        dhp = dhp + drh * r
        dr_pre = dr * r * (1.0 - r)
        du_pre = du * u * (1.0 - u)
        dhp = dhp + dr_pre @ wh_r.T + du_pre @ wh_u.T
        dwh[:, :dh] += h_prev.T @ dr_pre
        dwh[:, dh : 2 * dh] += h_prev.T @ du_pre
        dwh[:, 2 * dh :] += (r * h_prev).T @ dc_pre
        dgates[:, t, :dh] = dr_pre
        dgates[:, t, dh : 2 * dh] = du_pre
        dgates[:, t, 2 * dh :] = dc_pre
        carry = dhp
    g2 = dgates.reshape(B * T, 3 * dh)
    x2 = x.reshape(B * T, d_in)
    dx = (g2 @ wx.T).reshape(B, T, d_in)
    dwx = x2.T @ g2
    db = g2.sum(axis=0)
    return dx, dwx, dwh, db, carry


def band_scores_fwd(A, K, w):
    """Scaled inner products of answers against keys over the past window."""
    B, T, dk = A.shape
    s = np.zeros((B, T, w))
    inv = 1.0 / np.sqrt(dk)
    for j in range(w):
        o = w - 1 - j
        if o >= T:
            continue
        s[:, o:, j] = np.einsum("btd,btd->bt", A[:, o:, :], K[:, : T - o, :]) * inv
    return s


def band_scores_bwd(A, K, w, dS):
    B, T, dk = A.shape
    dA = np.zeros_like(A)
    dK = np.zeros_like(K)
    inv = 1.0 / np.sqrt(dk)
    for j in range(w):
        o = w - 1 - j
        if o >= T:
            continue
        g = dS[:, o:, j, None] * inv
        dA[:, o:, :] += g * K[:, : T - o, :]
        dK[:, : T - o, :] += g * A[:, o:, :]
    return dA, dK


def _lane_valid(T, w):
    t = np.arange(T)[:, None]
    j = np.arange(w)[None, :]
    return (t - w + 1 + j) >= 0


def band_softmax_fwd(S, w):
    """Max-guarded softmax over the valid lanes of each position."""
    B, T, _ = S.shape
    valid = _lane_valid(T, w)[None, :, :]
    neg = np.where(valid, S, -np.inf)
    m = neg.max(axis=2, keepdims=True)
    e = np.where(valid, np.exp(neg - m), 0.0)
    return e / e.sum(axis=2, keepdims=True)


def band_softmax_bwd(alpha, dalpha):
    dot = (alpha * dalpha).sum(axis=2, keepdims=True)
    return alpha * (dalpha - dot)


def band_wsum_fwd(alpha, X):
    """Weighted recombination of windowed values: R[t] = sum_j alpha[t,j] X[t-w+1+j]."""
    B, T, w = alpha.shape
    d = X.shape[2]
    R = np.zeros((B, T, d))
    for j in range(w):
        o = w - 1 - j
        if o >= T:
            continue
        R[:, o:, :] += alpha[:, o:, j, None] * X[:, : T - o, :]
    return R


def band_wsum_bwd(alpha, X, dR):
    B, T, w = alpha.shape
    dalpha = np.zeros_like(alpha)
    dX = np.zeros_like(X)
    for j in range(w):
        o = w - 1 - j
        if o >= T:
            continue
        dalpha[:, o:, j] = np.einsum("btd,btd->bt", dR[:, o:, :], X[:, : T - o, :])
        dX[:, : T - o, :] += alpha[:, o:, j, None] * dR[:, o:, :]
    return dalpha, dX
