"""Influence of individual samples on a fitted two-stage estimator and its MSE.

For a fit (theta, phi) with averaged moments Q_n and M_n, the first-order
influence of sample i on theta is

    I_theta(i) = -(dM/dtheta)^{-1} [ m_i - (dM/dphi) (dQ/dphi)^{-1} q_i ].

Only Jacobian-vector products are used, and linear systems are solved with
conjugate gradients. ``influence_all`` applies the adjoint trick: for a fixed
MSE gradient g it solves once for u = (dM/dtheta)^{-T} g and once for
w = (dQ/dphi)^{-T} (dM/dphi)^T u, after which every sample costs two inner
products: I_MSE(i) = -u.m_i + w.q_i.

With epsilon = -1/n, the change in MSE from dropping sample i is
approximated by ``loo_delta = -epsilon * (I1 + epsilon/2 * I2)`` where I2 is
the partial second-order term I_theta^T H_MSE I_theta (only when order 2).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from ._core import kernels
from .estimators import EstimatorState, TwoStageLS


class InfluenceError(RuntimeError):
    """A conjugate-gradient solve did not converge."""


@dataclass(frozen=True)
class InfluenceConfig:
    order: int = 1
    cg_tol: float = 1e-8
    cg_max_iter: Optional[int] = None
    damping: float = 0.0

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError("influence order must be 1 or 2")
        if not self.cg_tol > 0:
            raise ValueError("cg_tol must be positive")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")


class CGResult(NamedTuple):
    x: np.ndarray
    converged: bool
    iterations: int


def cg_solve(apply_operator, rhs, cfg: InfluenceConfig = InfluenceConfig()) -> CGResult:
    """Conjugate gradients for A x = rhs with A available only as a function."""
    b = np.asarray(rhs, dtype=float)
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CGResult(x, True, 0)
    op = apply_operator if cfg.damping == 0 else (lambda v: apply_operator(v) + cfg.damping * v)
    max_iter = cfg.cg_max_iter if cfg.cg_max_iter is not None else max(b.size, 1)
    r = b.copy()
    p = r.copy()
    rs = r @ r
    target = (cfg.cg_tol * bnorm) ** 2
    for it in range(1, max_iter + 1):
        Ap = op(p)
        pAp = p @ Ap
        if pAp <= 0:
            return CGResult(x, False, it)
        step = rs / pAp
        x = x + step * p
        r = r - step * Ap
        rs_new = r @ r
        if rs_new <= target:
            return CGResult(x, True, it)
        p = r + (rs_new / rs) * p
        rs = rs_new
    # recompute the true residual before declaring failure
    res = np.linalg.norm(op(x) - b)
    return CGResult(x, bool(res <= cfg.cg_tol * bnorm), max_iter)


def _solve(apply_operator, rhs, cfg, what):
    res = cg_solve(apply_operator, rhs, cfg)
    if not res.converged:
        raise InfluenceError(f"conjugate gradients did not converge for {what}")
    return res.x


def _mse_parts(mse, theta):
    """Gradient and (optional) Hessian-vector product of an MSE functional."""
    if hasattr(mse, "grad"):
        return np.asarray(mse.grad(theta), float), (lambda v: mse.hvp(theta, v))
    return np.asarray(mse, dtype=float), None


def influence_theta(state: EstimatorState, dataset, sample_index: int, cfg: InfluenceConfig = InfluenceConfig()):
    """First-order influence vector I_theta of one sample, via two CG solves."""
    spec, th, ph = state.spec, state.theta, state.phi
    one = dataset.take([sample_index])
    q_i = spec.q(ph, one)[0]
    m_i = spec.m(th, ph, one)[0]
    x = _solve(lambda v: spec.dQ_dphi(ph, dataset, v), q_i, cfg, "dQ/dphi") if len(ph) else np.zeros(0)
    rhs = m_i - (spec.dM_dphi(th, ph, dataset, x) if len(ph) else 0.0)
    return -_solve(lambda v: spec.dM_dtheta(th, ph, dataset, v), rhs, cfg, "dM/dtheta")


def influence_mse(state: EstimatorState, dataset, sample_index: int, mse_gradient,
                  cfg: InfluenceConfig = InfluenceConfig()) -> float:
    """I1 = g . I_theta, plus (epsilon/2) I_theta^T H I_theta when order is 2.

    ``mse_gradient`` is either the gradient vector of the MSE at
    ``state.theta`` or an MSE functional exposing ``grad`` and ``hvp``.
    """
    g, hvp = _mse_parts(mse_gradient, state.theta)
    I = influence_theta(state, dataset, sample_index, cfg)
    val = float(g @ I)
    if cfg.order == 2:
        if hvp is None:
            raise ValueError("second-order influence needs an MSE functional with hvp")
        val += 0.5 * (-1.0 / len(dataset)) * float(I @ hvp(I))
    return val


@dataclass(frozen=True)
class InfluenceReport:
    """Per-sample influences of one fitted state on one dataset.

    Attributes
    ----------
    theta : ndarray (n, dim theta) or None
        First-order influence vectors I_theta.
    first : ndarray (n,)
        First-order MSE influence g . I_theta.
    second : ndarray (n,) or None
        Partial second-order term I_theta^T H I_theta (order 2 only).
    influence : ndarray (n,)
        first + epsilon / 2 * second.
    loo_delta : ndarray (n,)
        -epsilon * influence, the predicted MSE(D_n) - MSE(D_n minus i).
    """

    theta: Optional[np.ndarray]
    first: np.ndarray
    second: Optional[np.ndarray]
    influence: np.ndarray
    loo_delta: np.ndarray
    epsilon: float
    adjoint_theta: np.ndarray
    adjoint_phi: np.ndarray

    def __len__(self):
        return len(self.first)


def theta_influences(state: EstimatorState, dataset, cfg: InfluenceConfig = InfluenceConfig()) -> np.ndarray:
    """All I_theta vectors using one adjoint solve pair per coordinate of theta."""
    spec, th, ph = state.spec, state.theta, state.phi
    q = spec.q(ph, dataset) if len(ph) else None
    m = spec.m(th, ph, dataset)
    out = np.empty_like(m)
    for j in range(len(th)):
        e = np.zeros(len(th))
        e[j] = 1.0
        u, w = _adjoints(state, dataset, e, cfg)
        out[:, j] = -(m @ u) + (q @ w if q is not None else 0.0)
    return out


def _adjoints(state, dataset, g, cfg):
    spec, th, ph = state.spec, state.theta, state.phi
    u = _solve(lambda v: spec.dM_dtheta(th, ph, dataset, v), g, cfg, "dM/dtheta adjoint")
    if not len(ph):
        return u, np.zeros(0)
    r = spec.dM_dphi_T(th, ph, dataset, u)
    w = _solve(lambda v: spec.dQ_dphi(ph, dataset, v), r, cfg, "dQ/dphi adjoint")
    return u, w


def influence_all(state: EstimatorState, dataset, mse_gradient, cfg: InfluenceConfig = InfluenceConfig(),
                  with_theta: Optional[bool] = None) -> InfluenceReport:
    """Influences of every sample with a number of CG solves independent of n."""
    spec, th, ph = state.spec, state.theta, state.phi
    n = len(dataset)
    eps = -1.0 / n
    g, hvp = _mse_parts(mse_gradient, th)
    u, w = _adjoints(state, dataset, g, cfg)
    first = -(spec.m(th, ph, dataset) @ u)
    if len(ph):
        first = first + spec.q(ph, dataset) @ w
    if with_theta is None:
        with_theta = cfg.order == 2 or len(th) <= 8
    I = theta_influences(state, dataset, cfg) if with_theta else None
    second = None
    infl = first
    if cfg.order == 2:
        if hvp is None:
            raise ValueError("second-order influence needs an MSE functional with hvp")
        H = np.column_stack([hvp(e) for e in np.eye(len(th))])
        second = np.einsum("ij,jk,ik->i", I, H, I)
        infl = first + 0.5 * eps * second
    return InfluenceReport(I, first, second, infl, -eps * infl, eps, u, w)


def dense_jacobians(state: EstimatorState, dataset):
    """Assemble (dQ/dphi, dM/dtheta, dM/dphi) as dense matrices from the JVPs."""
    spec, th, ph = state.spec, state.theta, state.phi
    dQ = np.column_stack([spec.dQ_dphi(ph, dataset, e) for e in np.eye(len(ph))])
    dMt = np.column_stack([spec.dM_dtheta(th, ph, dataset, e) for e in np.eye(len(th))])
    dMp = np.column_stack([spec.dM_dphi(th, ph, dataset, e) for e in np.eye(len(ph))])
    return dQ, dMt, dMp


def influence_theta_dense(state: EstimatorState, dataset) -> np.ndarray:
    """Cross-check path: all I_theta vectors from dense Jacobians and direct solves."""
    spec, th, ph = state.spec, state.theta, state.phi
    dQ, dMt, dMp = dense_jacobians(state, dataset)
    q = spec.q(ph, dataset)
    m = spec.m(th, ph, dataset)
    x = np.linalg.lstsq(dQ, q.T, rcond=None)[0]
    return -np.linalg.solve(dMt, m.T - dMp @ x).T


def influence_theta_closed_form(state: EstimatorState, dataset) -> np.ndarray:
    """All I_theta vectors for one-hot 2SLS from the grouped kernel."""
    spec = state.spec
    if not (isinstance(spec, TwoStageLS) and spec.instrument == "onehot"):
        raise ValueError("closed-form influence needs one-hot 2SLS")
    return kernels.grouped_influence(dataset.z, dataset.a, dataset.y, dataset.num_instruments, spec.code,
                                     state.phi, state.theta)
