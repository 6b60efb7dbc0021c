"""Pure numpy implementation of the grouped two-stage least-squares kernels.

With a one-hot instrument, the first stage is a per-group mean of the
treatment and the second stage reduces to a p x p system (p <= 2) built from
group totals. Feature codes: 0 -> [t, 1 - t], 1 -> [t, 1], 2 -> [t].
"""

import numpy as np

_DERIV = {0: np.array([1.0, -1.0]), 1: np.array([1.0, 0.0]), 2: np.array([1.0])}


def n_features(code):
    return 1 if code == 2 else 2


def features(t, code):
    t = np.asarray(t, dtype=float)
    if code == 0:
        return np.stack([t, 1.0 - t], axis=-1)
    if code == 1:
        return np.stack([t, np.ones_like(t)], axis=-1)
    return t[..., None]


def _solve(S, b):
    """Solve a tiny SPD system; returns (x, ok)."""
    p = S.shape[0]
    if p == 1:
        if not S[0, 0] > 0.0:
            return np.full(1, np.nan), False
        return b / S[0, 0], True
    det = S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]
    tr = S[0, 0] + S[1, 1]
    if not det > 1e-12 * tr * tr:
        return np.full(2, np.nan), False
    return np.array([S[1, 1] * b[0] - S[0, 1] * b[1], S[0, 0] * b[1] - S[1, 0] * b[0]]) / det, True


def _group_totals(z, a, y, m):
    cnt = np.bincount(z, minlength=m).astype(float)
    asum = np.bincount(z, weights=a, minlength=m)
    ysum = np.bincount(z, weights=y, minlength=m)
    return cnt, asum, ysum


def grouped_fit(z, a, y, m, code):
    """Closed-form 2SLS. Returns (phi, theta, status); status 0 ok, 1 singular."""
    cnt, asum, ysum = _group_totals(z, a, y, m)
    present = cnt > 0
    phi = np.where(present, asum / np.where(present, cnt, 1.0), 0.0)
    W = features(phi, code)
    S = (W * cnt[:, None]).T @ W
    b = W.T @ ysum
    theta, ok = _solve(S, b)
    return phi, theta, 0 if ok else 1


def grouped_influence(z, a, y, m, code, phi, theta):
    """Per-sample first-order influence I_theta(S_i), shape (n, p)."""
    n = len(z)
    cnt, _, ysum = _group_totals(z, a, y, m)
    d = _DERIV[code]
    W = features(phi, code)
    S = (W * cnt[:, None]).T @ W
    Hinv = np.linalg.inv(2.0 / n * S)
    res_g = W @ theta  # fitted second-stage value per group
    # d M_n / d phi_g, one column per group
    J = 2.0 / n * (np.outer(d, cnt * res_g - ysum) + W.T * (cnt * (d @ theta)))
    Wi = W[z]
    mi = 2.0 * Wi * (Wi @ theta - y)[:, None]
    cz = cnt[z]
    corr = J[:, z].T * (n * (phi[z] - a) / cz)[:, None]
    return -(mi - corr) @ Hinv.T


def subset_step(z, a, y, m, code, subsets, G, theta_ref, order):
    """Fit every subset, then its proxy MSE and per-sample LOO MSE deltas.

    Returns (thetas (B, p), mse (B,), loo (B, k), status (B,)).
    """
    B, k = subsets.shape
    p = n_features(code)
    thetas = np.full((B, p), np.nan)
    mse = np.full(B, np.nan)
    loo = np.zeros((B, k))
    status = np.zeros(B, dtype=np.int64)
    for b in range(B):
        idx = subsets[b]
        zb, ab, yb = z[idx], a[idx], y[idx]
        phi, theta, st = grouped_fit(zb, ab, yb, m, code)
        status[b] = st
        if st:
            continue
        thetas[b] = theta
        diff = theta - theta_ref
        mse[b] = diff @ G @ diff
        I = grouped_influence(zb, ab, yb, m, code, phi, theta)
        val = I @ (2.0 * G @ diff)
        if order == 2:
            val = val - 0.5 / k * np.einsum("ij,jk,ik->i", I, 2.0 * G, I)
        loo[b] = val / k
    return thetas, mse, loo, status


def grouped_loo(z, a, y, m, code):
    """Exact leave-one-out refits; rows are NaN where the refit is singular."""
    n = len(z)
    p = n_features(code)
    cnt, asum, ysum = _group_totals(z, a, y, m)
    present = cnt > 0
    phi = np.where(present, asum / np.where(present, cnt, 1.0), 0.0)
    W = features(phi, code)
    S = (W * cnt[:, None]).T @ W
    bvec = W.T @ ysum
    c2 = cnt[z] - 1.0
    phi2 = np.where(c2 > 0, (asum[z] - a) / np.where(c2 > 0, c2, 1.0), 0.0)
    W2 = features(phi2, code)
    Wg = W[z]
    S2 = S[None] - cnt[z][:, None, None] * Wg[:, :, None] * Wg[:, None, :] \
        + c2[:, None, None] * W2[:, :, None] * W2[:, None, :]
    b2 = bvec[None] - Wg * ysum[z][:, None] + W2 * (ysum[z] - y)[:, None]
    if p == 1:
        s11 = S2[:, 0, 0]
        ok = s11 > 0
        out = np.where(ok, b2[:, 0] / np.where(ok, s11, 1.0), np.nan)[:, None]
        return out
    det = S2[:, 0, 0] * S2[:, 1, 1] - S2[:, 0, 1] * S2[:, 1, 0]
    tr = S2[:, 0, 0] + S2[:, 1, 1]
    ok = det > 1e-12 * tr * tr
    safe = np.where(ok, det, 1.0)
    t0 = (S2[:, 1, 1] * b2[:, 0] - S2[:, 0, 1] * b2[:, 1]) / safe
    t1 = (S2[:, 0, 0] * b2[:, 1] - S2[:, 1, 0] * b2[:, 0]) / safe
    out = np.stack([t0, t1], axis=1)
    out[~ok] = np.nan
    return out
