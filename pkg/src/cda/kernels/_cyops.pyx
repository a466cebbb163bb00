# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in pyops.py (same signatures, same math).

Matrix products go through BLAS dgemm on the raw row-major buffers using the
transpose trick; pointwise gate math runs in C loops.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sig(double v) nogil:
    if v > 40.0:
        v = 40.0
    elif v < -40.0:
        v = -40.0
    return 1.0 / (1.0 + exp(-v))


cdef void _mm_nn(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c, double beta) nogil:
    # c(m,n) = a(m,k) @ b(k,n) + beta*c, row-major buffers
    cdef int m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef double one = 1.0
    if m == 0 or n == 0 or k == 0:
        return
    dgemm("N", "N", &n, &m, &k, &one, &b[0, 0], &n, &a[0, 0], &k, &beta, &c[0, 0], &n)


cdef void _mm_nt(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c, double beta) nogil:
    # c(m,n) = a(m,k) @ b(n,k)^T + beta*c
    cdef int m = a.shape[0], k = a.shape[1], n = b.shape[0]
    cdef double one = 1.0
    if m == 0 or n == 0 or k == 0:
        return
    dgemm("T", "N", &n, &m, &k, &one, &b[0, 0], &k, &a[0, 0], &k, &beta, &c[0, 0], &n)


cdef void _mm_tn(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c, double beta) nogil:
    # c(k1,k2) = a(m,k1)^T @ b(m,k2) + beta*c
    cdef int m = a.shape[0], k1 = a.shape[1], k2 = b.shape[1]
    cdef double one = 1.0
    if m == 0 or k1 == 0 or k2 == 0:
        return
    dgemm("N", "T", &k2, &k1, &m, &one, &b[0, 0], &k2, &a[0, 0], &k1, &beta, &c[0, 0], &k2)


def gru_forward(double[:, :, ::1] x, double[:, ::1] wx, double[:, ::1] wh,
                double[::1] b, double[:, ::1] h0):
    cdef int B = x.shape[0], T = x.shape[1], d_in = x.shape[2]
    cdef int dh = wh.shape[0]
    cdef int i, t, q
    H_arr = np.empty((B, T, dh))
    R_arr = np.empty((B, T, dh))
    U_arr = np.empty((B, T, dh))
    C_arr = np.empty((B, T, dh))
    gx_arr = np.empty((B * T, 3 * dh))
    gh_arr = np.empty((B, 2 * dh))
    gc_arr = np.empty((B, dh))
    rh_arr = np.empty((B, dh))
    hprev_arr = np.array(h0)
    cdef double[:, :, ::1] H = H_arr, R = R_arr, U = U_arr, C = C_arr
    cdef double[:, ::1] gh = gh_arr, gc = gc_arr, rh = rh_arr, hprev = hprev_arr
    cdef double[:, ::1] gx = gx_arr
    cdef double[:, ::1] x2 = np.reshape(np.asarray(x), (B * T, d_in))
    cdef double[:, ::1] wh_ru = np.ascontiguousarray(np.asarray(wh)[:, : 2 * dh])
    cdef double[:, ::1] wh_c = np.ascontiguousarray(np.asarray(wh)[:, 2 * dh :])
    cdef double r, u, c, h

    _mm_nn(x2, wx, gx, 0.0)
    with nogil:
        for i in range(B * T):
            for q in range(3 * dh):
                gx[i, q] += b[q]
        for t in range(T):
            _mm_nn(hprev, wh_ru, gh, 0.0)
            for i in range(B):
                for q in range(dh):
                    r = _sig(gx[i * T + t, q] + gh[i, q])
                    R[i, t, q] = r
                    rh[i, q] = r * hprev[i, q]
            _mm_nn(rh, wh_c, gc, 0.0)
            for i in range(B):
                for q in range(dh):
                    u = _sig(gx[i * T + t, dh + q] + gh[i, dh + q])
                    c = tanh(gx[i * T + t, 2 * dh + q] + gc[i, q])
                    h = (1.0 - u) * hprev[i, q] + u * c
                    U[i, t, q] = u
                    C[i, t, q] = c
                    H[i, t, q] = h
                    hprev[i, q] = h
    return H_arr, R_arr, U_arr, C_arr


def gru_backward(double[:, :, ::1] x, double[:, ::1] wx, double[:, ::1] wh,
                 double[:, ::1] h0, double[:, :, ::1] H, double[:, :, ::1] R,
                 double[:, :, ::1] U, double[:, :, ::1] C, double[:, :, ::1] dH):
    cdef int B = x.shape[0], T = x.shape[1], d_in = x.shape[2]
    cdef int dh = wh.shape[0]
    cdef int i, t, q
    dgates_arr = np.empty((B * T, 3 * dh))
    dwh_arr = np.zeros((dh, 3 * dh))
    dwh_r_arr = np.zeros((dh, dh))
    dwh_u_arr = np.zeros((dh, dh))
    dwh_c_arr = np.zeros((dh, dh))
    carry_arr = np.zeros((B, dh))
    drh_arr = np.empty((B, dh))
    dr_pre_arr = np.empty((B, dh))
    du_pre_arr = np.empty((B, dh))
    dc_pre_arr = np.empty((B, dh))
    rh_arr = np.empty((B, dh))
    hprev_arr = np.empty((B, dh))
    tmp_arr = np.empty((B, dh))
    cdef double[:, ::1] dgates = dgates_arr, carry = carry_arr, drh = drh_arr
    cdef double[:, ::1] dr_pre = dr_pre_arr, du_pre = du_pre_arr, dc_pre = dc_pre_arr
    cdef double[:, ::1] rh = rh_arr, hprev = hprev_arr, tmp = tmp_arr
    cdef double[:, ::1] dwh_r = dwh_r_arr, dwh_u = dwh_u_arr, dwh_c = dwh_c_arr
    cdef double[:, ::1] wh_r = np.ascontiguousarray(np.asarray(wh)[:, :dh])
    cdef double[:, ::1] wh_u = np.ascontiguousarray(np.asarray(wh)[:, dh : 2 * dh])
    cdef double[:, ::1] wh_c = np.ascontiguousarray(np.asarray(wh)[:, 2 * dh :])
    cdef double d, r, u, c, du, dc

    with nogil:
        for t in range(T - 1, -1, -1):
            for i in range(B):
                for q in range(dh):
                    hprev[i, q] = H[i, t - 1, q] if t > 0 else h0[i, q]
            for i in range(B):
                for q in range(dh):
                    r = R[i, t, q]
                    u = U[i, t, q]
                    c = C[i, t, q]
                    d = dH[i, t, q] + carry[i, q]
                    du = d * (c - hprev[i, q])
                    dc = d * u
                    carry[i, q] = d * (1.0 - u)
                    dc_pre[i, q] = dc * (1.0 - c * c)
                    du_pre[i, q] = du * u * (1.0 - u)
            _mm_nt(dc_pre, wh_c, drh, 0.0)
            for i in range(B):
                for q in range(dh):
                    r = R[i, t, q]
                    dr_pre[i, q] = drh[i, q] * hprev[i, q] * r * (1.0 - r)
                    carry[i, q] += drh[i, q] * r
                    rh[i, q] = r * hprev[i, q]
            _mm_nt(dr_pre, wh_r, tmp, 0.0)
            for i in range(B):
                for q in range(dh):
                    carry[i, q] += tmp[i, q]
            _mm_nt(du_pre, wh_u, tmp, 0.0)
            for i in range(B):
                for q in range(dh):
                    carry[i, q] += tmp[i, q]
            _mm_tn(hprev, dr_pre, dwh_r, 1.0)
            _mm_tn(hprev, du_pre, dwh_u, 1.0)
            _mm_tn(rh, dc_pre, dwh_c, 1.0)
            for i in range(B):
                for q in range(dh):
                    dgates[i * T + t, q] = dr_pre[i, q]
                    dgates[i * T + t, dh + q] = du_pre[i, q]
                    dgates[i * T + t, 2 * dh + q] = dc_pre[i, q]
    dwh_arr[:, :dh] = dwh_r_arr
    dwh_arr[:, dh : 2 * dh] = dwh_u_arr
    dwh_arr[:, 2 * dh :] = dwh_c_arr
    dx_arr = np.empty((B * T, d_in))
    dwx_arr = np.empty((d_in, 3 * dh))
    cdef double[:, ::1] dx2 = dx_arr, dwx = dwx_arr
    cdef double[:, ::1] x2 = np.reshape(np.asarray(x), (B * T, d_in))
    _mm_nt(dgates, wx, dx2, 0.0)
    _mm_tn(x2, dgates, dwx, 0.0)
    db_arr = dgates_arr.sum(axis=0)
    return dx_arr.reshape(B, T, d_in), dwx_arr, dwh_arr, db_arr, carry_arr


def band_scores_fwd(double[:, :, ::1] A, double[:, :, ::1] K, int w):
    cdef int B = A.shape[0], T = A.shape[1], dk = A.shape[2]
    cdef int i, t, j, q, p
    cdef double acc, inv = 1.0 / sqrt(<double>dk)
    S_arr = np.zeros((B, T, w))
    cdef double[:, :, ::1] S = S_arr
    with nogil:
        for i in range(B):
            for t in range(T):
                for j in range(w):
                    p = t - w + 1 + j
                    if p < 0:
                        continue
                    acc = 0.0
                    for q in range(dk):
                        acc += A[i, t, q] * K[i, p, q]
                    S[i, t, j] = acc * inv
    return S_arr


def band_scores_bwd(double[:, :, ::1] A, double[:, :, ::1] K, int w, double[:, :, ::1] dS):
    cdef int B = A.shape[0], T = A.shape[1], dk = A.shape[2]
    cdef int i, t, j, q, p
    cdef double g, inv = 1.0 / sqrt(<double>dk)
    dA_arr = np.zeros((B, T, dk))
    dK_arr = np.zeros((B, T, dk))
    cdef double[:, :, ::1] dA = dA_arr, dK = dK_arr
    with nogil:
        for i in range(B):
            for t in range(T):
                for j in range(w):
                    p = t - w + 1 + j
                    if p < 0:
                        continue
                    g = dS[i, t, j] * inv
                    for q in range(dk):
                        dA[i, t, q] += g * K[i, p, q]
                        dK[i, p, q] += g * A[i, t, q]
    return dA_arr, dK_arr


def band_softmax_fwd(double[:, :, ::1] S, int w):
    cdef int B = S.shape[0], T = S.shape[1]
    cdef int i, t, j, lo
    cdef double m, z
    alpha_arr = np.zeros((B, T, w))
    cdef double[:, :, ::1] alpha = alpha_arr
    with nogil:
        for i in range(B):
            for t in range(T):
                lo = w - 1 - t
                if lo < 0:
                    lo = 0
                m = S[i, t, lo]
                for j in range(lo + 1, w):
                    if S[i, t, j] > m:
                        m = S[i, t, j]
                z = 0.0
                for j in range(lo, w):
                    alpha[i, t, j] = exp(S[i, t, j] - m)
                    z += alpha[i, t, j]
                for j in range(lo, w):
                    alpha[i, t, j] /= z
    return alpha_arr


def band_softmax_bwd(double[:, :, ::1] alpha, double[:, :, ::1] dalpha):
    cdef int B = alpha.shape[0], T = alpha.shape[1], w = alpha.shape[2]
    cdef int i, t, j
    cdef double dot
    dS_arr = np.zeros((B, T, w))
    cdef double[:, :, ::1] dS = dS_arr
    with nogil:
        for i in range(B):
            for t in range(T):
                dot = 0.0
                for j in range(w):
                    dot += alpha[i, t, j] * dalpha[i, t, j]
                for j in range(w):
                    dS[i, t, j] = alpha[i, t, j] * (dalpha[i, t, j] - dot)
    return dS_arr


def band_wsum_fwd(double[:, :, ::1] alpha, double[:, :, ::1] X):
    cdef int B = alpha.shape[0], T = alpha.shape[1], w = alpha.shape[2]
    cdef int d = X.shape[2]
    cdef int i, t, j, q, p
    cdef double a
    R_arr = np.zeros((B, T, d))
    cdef double[:, :, ::1] R = R_arr
    with nogil:
        for i in range(B):
            for t in range(T):
                for j in range(w):
                    p = t - w + 1 + j
                    if p < 0:
                        continue
                    a = alpha[i, t, j]
                    for q in range(d):
                        R[i, t, q] += a * X[i, p, q]
    return R_arr


def band_wsum_bwd(double[:, :, ::1] alpha, double[:, :, ::1] X, double[:, :, ::1] dR):
    cdef int B = alpha.shape[0], T = alpha.shape[1], w = alpha.shape[2]
    cdef int d = X.shape[2]
    cdef int i, t, j, q, p
    cdef double acc, a
    dalpha_arr = np.zeros((B, T, w))
    dX_arr = np.zeros((B, T, d))
    cdef double[:, :, ::1] dalpha = dalpha_arr, dX = dX_arr
    with nogil:
        for i in range(B):
            for t in range(T):
                for j in range(w):
                    p = t - w + 1 + j
                    if p < 0:
                        continue
                    acc = 0.0
                    a = alpha[i, t, j]
                    for q in range(d):
                        acc += dR[i, t, q] * X[i, p, q]
                        dX[i, p, q] += a * dR[i, t, q]
                    dalpha[i, t, j] = acc
    return dalpha_arr, dX_arr
