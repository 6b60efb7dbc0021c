# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled grouped two-stage least-squares kernels.

Same API and semantics as ``_fallback``; loops run in C so that the many small
subset fits inside the policy optimizer avoid per-call numpy overhead.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline int _nfeat(int code) nogil:
    return 1 if code == 2 else 2


cdef inline void _feat(double t, int code, double* w) nogil:
    if code == 0:
        w[0] = t
        w[1] = 1.0 - t
    elif code == 1:
        w[0] = t
        w[1] = 1.0
    else:
        w[0] = t


cdef inline void _deriv(int code, double* d) nogil:
    d[0] = 1.0
    if code == 0:
        d[1] = -1.0
    elif code == 1:
        d[1] = 0.0


cdef inline int _solve(int p, double* S, double* b, double* x) nogil:
    """Solve the p x p system (row-major S), p in {1, 2}; 0 on success."""
    cdef double det, tr
    if p == 1:
        if not S[0] > 0.0:
            return 1
        x[0] = b[0] / S[0]
        return 0
    det = S[0] * S[3] - S[1] * S[2]
    tr = S[0] + S[3]
    if not det > 1e-12 * tr * tr:
        return 1
    x[0] = (S[3] * b[0] - S[1] * b[1]) / det
    x[1] = (S[0] * b[1] - S[2] * b[0]) / det
    return 0


cdef int _fit(const long[:] z, const double[:] a, const double[:] y, const long[:] idx, int k, int m, int code,
              double[:] cnt, double[:] asum, double[:] ysum, double[:] phi, double* theta) nogil:
    cdef int i, j, g, r, c
    cdef int p = _nfeat(code)
    cdef double S[4]
    cdef double bv[2]
    cdef double w[2]
    for g in range(m):
        cnt[g] = 0.0
        asum[g] = 0.0
        ysum[g] = 0.0
    for j in range(k):
        i = idx[j]
        g = z[i]
        cnt[g] += 1.0
        asum[g] += a[i]
        ysum[g] += y[i]
    for r in range(4):
        S[r] = 0.0
    bv[0] = 0.0
    bv[1] = 0.0
    for g in range(m):
        if cnt[g] > 0.0:
            phi[g] = asum[g] / cnt[g]
        else:
            phi[g] = 0.0
        _feat(phi[g], code, w)
        for r in range(p):
            bv[r] += w[r] * ysum[g]
            for c in range(p):
                S[r * p + c] += cnt[g] * w[r] * w[c]
    return _solve(p, S, bv, theta)


cdef void _influence(const long[:] z, const double[:] a, const double[:] y, const long[:] idx, int k, int m,
                     int code, const double[:] cnt, const double[:] ysum, const double[:] phi, const double* theta,
                     double[:, :] J, double[:, :] out) nogil:
    """First-order I_theta for the k samples listed in idx, written to out[:k]."""
    cdef int i, j, g, r, c
    cdef int p = _nfeat(code)
    cdef double S[4]
    cdef double Hinv[4]
    cdef double w[2]
    cdef double d[2]
    cdef double v[2]
    cdef double det, fit, dth, resid, scale
    cdef double n = k
    _deriv(code, d)
    dth = 0.0
    for r in range(p):
        dth += d[r] * theta[r]
    for r in range(4):
        S[r] = 0.0
    for g in range(m):
        _feat(phi[g], code, w)
        fit = 0.0
        for r in range(p):
            fit += w[r] * theta[r]
            for c in range(p):
                S[r * p + c] += cnt[g] * w[r] * w[c]
        for r in range(p):
            J[r, g] = 2.0 / n * (d[r] * (cnt[g] * fit - ysum[g]) + w[r] * cnt[g] * dth)
    # inverse of H_theta = (2/n) S
    if p == 1:
        Hinv[0] = n / (2.0 * S[0])
    else:
        det = S[0] * S[3] - S[1] * S[2]
        Hinv[0] = n / 2.0 * S[3] / det
        Hinv[1] = -n / 2.0 * S[1] / det
        Hinv[2] = -n / 2.0 * S[2] / det
        Hinv[3] = n / 2.0 * S[0] / det
    for j in range(k):
        i = idx[j]
        g = z[i]
        _feat(phi[g], code, w)
        resid = -y[i]
        for r in range(p):
            resid += w[r] * theta[r]
        scale = n * (phi[g] - a[i]) / cnt[g]
        for r in range(p):
            v[r] = 2.0 * w[r] * resid - J[r, g] * scale
        for r in range(p):
            out[j, r] = 0.0
            for c in range(p):
                out[j, r] -= Hinv[r * p + c] * v[c]


def grouped_fit(z, a, y, int m, int code):
    cdef const long[:] zz = np.ascontiguousarray(z, dtype=np.int64)
    cdef const double[:] aa = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:] yy = np.ascontiguousarray(y, dtype=np.float64)
    cdef int n = zz.shape[0]
    cdef long[:] idx = np.arange(n, dtype=np.int64)
    cnt = np.zeros(m)
    asum = np.zeros(m)
    ysum = np.zeros(m)
    phi = np.zeros(m)
    theta = np.zeros(_nfeat(code))
    cdef double[:] th = theta
    cdef int st
    st = _fit(zz, aa, yy, idx, n, m, code, cnt, asum, ysum, phi, &th[0])
    if st:
        theta[:] = np.nan
    return phi, theta, st


def grouped_influence(z, a, y, int m, int code, phi, theta):
    cdef const long[:] zz = np.ascontiguousarray(z, dtype=np.int64)
    cdef const double[:] aa = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:] yy = np.ascontiguousarray(y, dtype=np.float64)
    cdef int n = zz.shape[0]
    cdef int p = _nfeat(code)
    cdef long[:] idx = np.arange(n, dtype=np.int64)
    cnt = np.bincount(np.asarray(zz), minlength=m).astype(np.float64)
    ysum = np.bincount(np.asarray(zz), weights=np.asarray(yy), minlength=m)
    cdef const double[:] ph = np.ascontiguousarray(phi, dtype=np.float64)
    cdef const double[:] th = np.ascontiguousarray(theta, dtype=np.float64)
    J = np.zeros((p, m))
    out = np.zeros((n, p))
    _influence(zz, aa, yy, idx, n, m, code, cnt, ysum, ph, &th[0], J, out)
    return out


def subset_step(z, a, y, int m, int code, subsets, G, theta_ref, int order):
    cdef const long[:] zz = np.ascontiguousarray(z, dtype=np.int64)
    cdef const double[:] aa = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:] yy = np.ascontiguousarray(y, dtype=np.float64)
    cdef const long[:, :] sub = np.ascontiguousarray(subsets, dtype=np.int64)
    cdef const double[:, :] GG = np.ascontiguousarray(G, dtype=np.float64)
    cdef const double[:] tref = np.ascontiguousarray(theta_ref, dtype=np.float64)
    cdef int B = sub.shape[0]
    cdef int k = sub.shape[1]
    cdef int p = _nfeat(code)
    thetas_a = np.full((B, p), np.nan)
    mse_a = np.full(B, np.nan)
    loo_a = np.zeros((B, k))
    status_a = np.zeros(B, dtype=np.int64)
    cdef double[:, :] thetas = thetas_a
    cdef double[:] mse = mse_a
    cdef double[:, :] loo = loo_a
    cdef long[:] status = status_a
    cdef double[:] cnt = np.zeros(m)
    cdef double[:] asum = np.zeros(m)
    cdef double[:] ysum = np.zeros(m)
    cdef double[:] phi = np.zeros(m)
    cdef double[:, :] J = np.zeros((p, m))
    cdef double[:, :] I = np.zeros((k, p))
    cdef double th[2]
    cdef double diff[2]
    cdef double grad[2]
    cdef double val, quad, tmp
    cdef int b, j, r, c, st
    with nogil:
        for b in range(B):
            st = _fit(zz, aa, yy, sub[b], k, m, code, cnt, asum, ysum, phi, th)
            status[b] = st
            if st:
                continue
            for r in range(p):
                thetas[b, r] = th[r]
                diff[r] = th[r] - tref[r]
            val = 0.0
            for r in range(p):
                grad[r] = 0.0
                for c in range(p):
                    grad[r] += 2.0 * GG[r, c] * diff[c]
                val += 0.5 * grad[r] * diff[r]
            mse[b] = val
            _influence(zz, aa, yy, sub[b], k, m, code, cnt, ysum, phi, th, J, I)
            for j in range(k):
                val = 0.0
                for r in range(p):
                    val += grad[r] * I[j, r]
                if order == 2:
                    quad = 0.0
                    for r in range(p):
                        tmp = 0.0
                        for c in range(p):
                            tmp += 2.0 * GG[r, c] * I[j, c]
                        quad += I[j, r] * tmp
                    val -= 0.5 / k * quad
                loo[b, j] = val / k
    return thetas_a, mse_a, loo_a, status_a


def grouped_loo(z, a, y, int m, int code):
    cdef const long[:] zz = np.ascontiguousarray(z, dtype=np.int64)
    cdef const double[:] aa = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:] yy = np.ascontiguousarray(y, dtype=np.float64)
    cdef int n = zz.shape[0]
    cdef int p = _nfeat(code)
    cdef long[:] idx = np.arange(n, dtype=np.int64)
    cdef double[:] cnt = np.zeros(m)
    cdef double[:] asum = np.zeros(m)
    cdef double[:] ysum = np.zeros(m)
    cdef double[:] phi = np.zeros(m)
    out_a = np.full((n, p), np.nan)
    cdef double[:, :] out = out_a
    cdef double th[2]
    cdef double S[4]
    cdef double S2[4]
    cdef double bv[2]
    cdef double b2[2]
    cdef double w[2]
    cdef double w2[2]
    cdef double c2, phi2
    cdef int i, g, r, c
    _fit(zz, aa, yy, idx, n, m, code, cnt, asum, ysum, phi, th)
    for r in range(4):
        S[r] = 0.0
    bv[0] = 0.0
    bv[1] = 0.0
    for g in range(m):
        _feat(phi[g], code, w)
        for r in range(p):
            bv[r] += w[r] * ysum[g]
            for c in range(p):
                S[r * p + c] += cnt[g] * w[r] * w[c]
    with nogil:
        for i in range(n):
            g = zz[i]
            c2 = cnt[g] - 1.0
            phi2 = (asum[g] - aa[i]) / c2 if c2 > 0.0 else 0.0
            _feat(phi[g], code, w)
            _feat(phi2, code, w2)
            for r in range(p):
                b2[r] = bv[r] - w[r] * ysum[g] + w2[r] * (ysum[g] - yy[i])
                for c in range(p):
                    S2[r * p + c] = S[r * p + c] - cnt[g] * w[r] * w[c] + c2 * w2[r] * w2[c]
            if _solve(p, S2, b2, th) == 0:
                for r in range(p):
                    out[i, r] = th[r]
    return out_a
