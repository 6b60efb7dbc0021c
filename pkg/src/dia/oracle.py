"""Analytic and brute-force reference values for instrument allocation.

For a just-identified linear IV estimator with instrument vector G, regressor
W and structural error e, sqrt(n)(theta_hat - theta0) has covariance
J^{-1} Sigma J^{-T} with J = E[G W'] and Sigma = E[e^2 G G']. Weighting by
V = E_eval[psi psi'] gives U = V^{1/2} J^{-1} Sigma J^{-T} V^{1/2}; then
n E[MSE] -> trace(U) (the nuclear norm, U being PSD) and
n^2 Var[MSE] -> 2 ||U||_F^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import stats

from . import rng as rngmod
from .estimators import EstimationError, PredictionMSE, spec_for
from .policy import PolicyRegistry, SoftmaxPolicy, register
from .sim import DgpInstance, linear_features, sample_batch


@dataclass(frozen=True)
class LinearMoments:
    V: np.ndarray
    J: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        V, J, S = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (self.V, self.J, self.Sigma))
        if not (V.shape == J.shape == S.shape and V.shape[0] == V.shape[1]):
            raise ValueError("V, J and Sigma must be square matrices of equal size")
        if not np.allclose(V, V.T) or np.linalg.eigvalsh(V).min() < -1e-12:
            raise ValueError("V must be symmetric positive semi-definite")
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "Sigma", S)


def _psd_sqrt(V):
    w, Q = np.linalg.eigh(V)
    return (Q * np.sqrt(np.clip(w, 0.0, None))) @ Q.T


def linear_asymptotics(moments: LinearMoments):
    """Return (limit of n E[MSE], limit of n^2 Var[MSE])."""
    J = moments.J
    if abs(np.linalg.det(J)) < 1e-14 * max(1.0, np.abs(J).max()) ** J.shape[0]:
        raise np.linalg.LinAlgError("J is singular")
    Jinv = np.linalg.inv(J)
    R = _psd_sqrt(moments.V)
    U = R @ Jinv @ moments.Sigma @ Jinv.T @ R
    s = np.linalg.svd(U, compute_uv=False)
    return float(s.sum()), float(2.0 * np.sum(U * U))


def binary_instrument_objective(p: float, sigma0_sq: float, sigma1_sq: float) -> float:
    """sigma0^2 / (1 - p) + sigma1^2 / p for a full-compliance binary instrument."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    return sigma0_sq / (1.0 - p) + sigma1_sq / p


def binary_instrument_optimum(sigma0_sq: float, sigma1_sq: float) -> float:
    """argmin_p of :func:`binary_instrument_objective`: sigma1 / (sigma0 + sigma1)."""
    s0, s1 = math.sqrt(sigma0_sq), math.sqrt(sigma1_sq)
    return s1 / (s0 + s1)


def eval_gram(dgp: DgpInstance) -> np.ndarray:
    """V = (1/M) sum psi psi' over the evaluation set, the weight matrix of the scored MSE."""
    psi = linear_features(dgp.kind, dgp.eval_set.x, dgp.eval_set.a)
    return psi.T @ psi / len(psi)


def binary_full_compliance_moments(p: float, sigma0: float, sigma1: float, V) -> LinearMoments:
    """Moments of one-hot 2SLS with A = Z ~ Bernoulli(p) and features [a, 1 - a].

    Rows of J index the instrument (z = 0, z = 1); columns the features.
    """
    J = np.array([[0.0, 1.0 - p], [p, 0.0]])
    Sigma = np.diag([(1.0 - p) * sigma0 ** 2, p * sigma1 ** 2])
    return LinearMoments(np.asarray(V, dtype=float), J, Sigma)


def _clipped_normal_mean(g, sd):
    """E[clip(g + U, 0, 1)] for U ~ N(0, sd^2), via E[X+] - E[(X - 1)+]."""
    g = np.asarray(g, dtype=float)
    if sd == 0:
        return np.clip(g, 0.0, 1.0)
    plus = lambda c: c * stats.norm.cdf(c / sd) + sd * stats.norm.pdf(c / sd)
    return plus(g) - plus(g - 1.0)


def onehot_2sls_asymptotics(dgp: DgpInstance, probs) -> float:
    """Limit of n E[MSE] for one-hot 2SLS with features [a, 1 - a] under a fixed instrument policy.

    With compliance mu_z = P(A=1 | z), rows M_z = [mu_z, 1 - mu_z] and
    residual variance s_z^2 = sigma_u^2 + mu_z sigma1^2 + (1 - mu_z) sigma0^2,
    the covariance is A^{-1} B A^{-1} for A = M' diag(p) M and
    B = M' diag(p s^2) M, and n E[MSE] -> trace(V A^{-1} B A^{-1}).
    Instruments with zero probability are dropped; returns inf when the
    remaining design cannot identify both parameters.
    """
    if dgp.kind not in ("iv", "binary_confounded"):
        raise ValueError("the one-hot formula covers the iv and binary_confounded kinds")
    cfg = dgp.config
    p = np.asarray(probs, dtype=float)
    if p.shape != (dgp.num_instruments,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probs must be a distribution over the instruments")
    mu = _clipped_normal_mean(dgp.gamma, cfg.sigma_u)
    M = np.stack([mu, 1.0 - mu], axis=1)
    s2 = cfg.sigma_u ** 2 + mu * cfg.sigma1 ** 2 + (1.0 - mu) * cfg.sigma0 ** 2
    A = M.T @ (p[:, None] * M)
    B = M.T @ ((p * s2)[:, None] * M)
    if np.linalg.cond(A) > 1e12:
        return float("inf")
    Ainv = np.linalg.inv(A)
    return float(np.trace(eval_gram(dgp) @ Ainv @ B @ Ainv))


def simplex_grid(m: int, step: float, cap: int = 20000) -> np.ndarray:
    """All probability vectors over m items with entries on a grid of ``step``."""
    units = int(round(1.0 / step))
    if abs(units * step - 1.0) > 1e-9:
        raise ValueError("grid step must divide 1")
    count = math.comb(units + m - 1, m - 1)
    if count > cap:
        raise ValueError(f"simplex grid has {count} points, above the cap of {cap}")
    pts = []
    for bars in combinations(range(units + m - 1), m - 1):
        prev = -1
        parts = []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(units + m - 2 - prev)
        pts.append(parts)
    return np.asarray(pts, dtype=float) / units


def mc_policy_mse(dgp: DgpInstance, probs, mc_trials: int, n: int, seed: int = 0, point: int = 0, spec=None):
    """Monte-Carlo mean and stderr of the true MSE of fits on n samples under a fixed policy."""
    spec = spec or spec_for(dgp.kind)
    truth = PredictionMSE.truth(spec, dgp)
    probs = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore"):
        pol = SoftmaxPolicy(len(probs), np.log(probs))
    reg = register(PolicyRegistry(), pol, n)
    vals = []
    for t in range(mc_trials):
        data = sample_batch(dgp, pol, n, reg, rngmod.stream(seed, point, t), policy_id=0)
        try:
            vals.append(truth.value(spec.fit(data).theta))
        except EstimationError:
            vals.append(np.inf)
    vals = np.asarray(vals)
    if not np.all(np.isfinite(vals)):
        return float("inf"), float("nan")
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))


def brute_force_policy(dgp: DgpInstance, simplex_grid_step: float = 0.05, mc_trials: int = 200,
                       n_per_trial: int = 2000, seed: int = 0, cap: int = 20000):
    """Grid search over unconditional policies for the smallest expected MSE.

    Returns (best probability vector, table) where table rows are
    (probabilities, mean MSE, stderr). Grid point i uses streams (seed, i, trial).
    """
    if dgp.covariate_dim:
        raise ValueError("brute force covers unconditional policies only")
    grid = simplex_grid(dgp.num_instruments, simplex_grid_step, cap)
    spec = spec_for(dgp.kind)
    table = []
    for i, p in enumerate(grid):
        mean, se = mc_policy_mse(dgp, p, mc_trials, n_per_trial, seed, i, spec)
        table.append((p, mean, se))
    best = min(range(len(table)), key=lambda i: table[i][1])
    return table[best][0], table
