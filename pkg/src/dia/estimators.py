"""Two-stage moment estimators and MSE functionals.

Every family exposes the same moment interface so the influence module can
treat them uniformly:

* per-sample first-stage moments ``q(S; phi)`` and second-stage moments
  ``m(S; theta, phi)``;
* Jacobian-vector products of the averaged moments ``Q_n`` and ``M_n``:
  ``dQ/dphi @ v``, ``dM/dtheta @ v``, ``dM/dphi @ v`` and ``u @ dM/dphi``.

Families
--------
``TwoStageLS``
    Least-squares first stage on an instrument design matrix, linear second
    stage on features of the fitted treatment. Closed form.
``LogisticCIV``
    Logistic first stage P(A=1 | x, z), linear second stage on the treatment
    features averaged over the fitted treatment law.
``NeuralCIV``
    Both stages are 8-unit sigmoid MLPs trained with Adam.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _mlp
from ._core import kernels
from .sim import Dataset, EvalSet

FEATURE_CODES = {"indicator": 0, "affine": 1, "scalar": 2}


class EstimationError(RuntimeError):
    """The estimator could not be fitted (e.g. singular normal equations)."""


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-6
    max_iter: int = 5000
    lr: float = 1e-2
    solver: str = "newton"


@dataclass(frozen=True)
class EstimatorState:
    theta: np.ndarray
    phi: np.ndarray
    spec: "MomentSpec"
    converged: bool = True
    q_norm: float = 0.0
    m_norm: float = 0.0
    iterations: int = 0


class MomentSpec:
    """Interface shared by all two-stage families."""

    family: str = ""

    # moments ---------------------------------------------------------------
    def q(self, phi, data) -> np.ndarray:
        raise NotImplementedError

    def m(self, theta, phi, data) -> np.ndarray:
        raise NotImplementedError

    def Q(self, phi, data):
        return self.q(phi, data).mean(axis=0)

    def M(self, theta, phi, data):
        return self.m(theta, phi, data).mean(axis=0)

    # Jacobian-vector products ----------------------------------------------
    def dQ_dphi(self, phi, data, v):
        raise NotImplementedError

    def dM_dtheta(self, theta, phi, data, v):
        raise NotImplementedError

    def dM_dphi(self, theta, phi, data, v):
        raise NotImplementedError

    def dM_dphi_T(self, theta, phi, data, u):
        raise NotImplementedError

    # prediction ------------------------------------------------------------
    def predict(self, theta, x, a) -> np.ndarray:
        raise NotImplementedError

    def predict_grad(self, theta, x, a) -> np.ndarray:
        """Gradient of f(x, a; theta) with respect to theta, shape (M, dim theta)."""
        raise NotImplementedError

    def predict_hvp(self, theta, x, a, w, v):
        """sum_j w_j * Hess_theta f(x_j, a_j) @ v (zero for linear families)."""
        return np.zeros_like(np.asarray(theta, dtype=float))

    def fit(self, data: Dataset, init: Optional[EstimatorState] = None, opts: FitOptions = FitOptions()):
        raise NotImplementedError

    def state(self, theta, phi, data, **kw) -> EstimatorState:
        qn = float(np.max(np.abs(self.Q(phi, data)))) if len(phi) else 0.0
        mn = float(np.max(np.abs(self.M(theta, phi, data))))
        return EstimatorState(np.asarray(theta, float), np.asarray(phi, float), self, q_norm=qn, m_norm=mn, **kw)


class _LinearSecondStage(MomentSpec):
    """Second stage regressing Y on psi(x, t) = psi0(x) + t * delta(x).

    ``t`` is the fitted treatment (first-stage prediction or probability);
    subclasses define ``t``, its gradient ``dt/dphi`` and the first stage.
    """

    def _psi(self, data):
        raise NotImplementedError

    def _t(self, phi, data):
        raise NotImplementedError

    def _dt(self, phi, data):
        raise NotImplementedError

    def _W(self, phi, data):
        psi0, delta = self._psi(data)
        return psi0 + self._t(phi, data)[:, None] * delta, delta

    def m(self, theta, phi, data):
        W, _ = self._W(phi, data)
        return 2.0 * W * (W @ theta - data.y)[:, None]

    def dM_dtheta(self, theta, phi, data, v):
        W, _ = self._W(phi, data)
        return 2.0 * W.T @ (W @ v) / len(data)

    def dM_dphi(self, theta, phi, data, v):
        W, delta = self._W(phi, data)
        tdot = self._dt(phi, data) @ v
        res = W @ theta - data.y
        dm = 2.0 * tdot[:, None] * (delta * res[:, None] + W * (delta @ theta)[:, None])
        return dm.mean(axis=0)

    def dM_dphi_T(self, theta, phi, data, u):
        W, delta = self._W(phi, data)
        res = W @ theta - data.y
        coef = 2.0 * ((delta @ u) * res + (W @ u) * (delta @ theta))
        return self._dt(phi, data).T @ coef / len(data)

    def _second_stage(self, phi, data):
        W, _ = self._W(phi, data)
        S = W.T @ W
        b = W.T @ data.y
        try:
            cond = np.linalg.cond(S)
        except np.linalg.LinAlgError:
            cond = np.inf
        if not np.isfinite(cond) or cond > 1e12:
            raise EstimationError("second-stage normal equations are singular")
        return np.linalg.solve(S, b)


class TwoStageLS(_LinearSecondStage):
    """Two-stage least squares.

    Parameters
    ----------
    features : {"indicator", "affine", "scalar"}
        Second-stage features of the fitted treatment t: ``[t, 1 - t]``,
        ``[t, 1]`` or ``[t]``.
    instrument : {"onehot", "raw"}
        First-stage design: one-hot encoding of the instrument index, or the
        raw instrument value as a single column.
    """

    family = "twostage_ls"

    def __init__(self, features: str = "indicator", instrument: str = "onehot"):
        if features not in FEATURE_CODES or instrument not in ("onehot", "raw"):
            raise ValueError("unknown 2SLS configuration")
        self.features = features
        self.instrument = instrument
        self.code = FEATURE_CODES[features]
        self.dim_theta = 1 if features == "scalar" else 2

    def design(self, data):
        if self.instrument == "raw":
            return data.z.astype(float)[:, None]
        Z = np.zeros((len(data), data.num_instruments))
        Z[np.arange(len(data)), data.z] = 1.0
        return Z

    def _psi(self, data):
        n = len(data)
        if self.code == 0:
            return np.tile([0.0, 1.0], (n, 1)), np.tile([1.0, -1.0], (n, 1))
        if self.code == 1:
            return np.tile([0.0, 1.0], (n, 1)), np.tile([1.0, 0.0], (n, 1))
        return np.zeros((n, 1)), np.ones((n, 1))

    def _t(self, phi, data):
        return self.design(data) @ phi

    def _dt(self, phi, data):
        return self.design(data)

    def q(self, phi, data):
        Z = self.design(data)
        return 2.0 * Z * (Z @ phi - data.a)[:, None]

    def dQ_dphi(self, phi, data, v):
        Z = self.design(data)
        return 2.0 * Z.T @ (Z @ v) / len(data)

    def predict(self, theta, x, a):
        return kernels_features(a, self.code) @ np.asarray(theta, float)

    def predict_grad(self, theta, x, a):
        return kernels_features(a, self.code)

    def fit(self, data, init=None, opts=FitOptions()):
        if len(data) == 0:
            raise EstimationError("empty dataset")
        if self.instrument == "onehot":
            phi, theta, st = kernels.grouped_fit(data.z, data.a, data.y, data.num_instruments, self.code)
            if st:
                raise EstimationError("second-stage normal equations are singular")
        else:
            Z = self.design(data)
            S = Z.T @ Z
            if np.linalg.matrix_rank(S) < S.shape[0]:
                raise EstimationError("first-stage design is rank deficient")
            phi = np.linalg.solve(S, Z.T @ data.a)
            theta = self._second_stage(phi, data)
        return self.state(theta, phi, data)


def kernels_features(a, code):
    from ._core import features

    return features(np.asarray(a, dtype=float), code)


class LogisticCIV(_LinearSecondStage):
    """Conditional IV with a logistic first stage and linear outcome f = c_x * x2 + c_a * a.

    The first stage models P(A=1 | x, z) = sigmoid(r(x, z) @ phi) with
    r = [onehot(z), x1 * onehot(z)], so X1 may flip each instrument's effect.
    A small ridge term keeps the first stage finite when a cell is separated.
    """

    family = "logistic_civ"

    def __init__(self, ridge: float = 1e-3):
        self.ridge = float(ridge)
        self.dim_theta = 2

    def _r(self, data):
        n, m = len(data), data.num_instruments
        R = np.zeros((n, 2 * m))
        R[np.arange(n), data.z] = 1.0
        R[np.arange(n), m + data.z] = data.x[:, 0]
        return R

    def _psi(self, data):
        n = len(data)
        psi0 = np.stack([data.x[:, 1], np.zeros(n)], axis=1)
        delta = np.tile([0.0, 1.0], (n, 1))
        return psi0, delta

    def _p(self, phi, data):
        return _mlp.sigmoid(self._r(data) @ phi)

    def _t(self, phi, data):
        return self._p(phi, data)

    def _dt(self, phi, data):
        p = self._p(phi, data)
        return (p * (1.0 - p))[:, None] * self._r(data)

    def q(self, phi, data):
        return (self._p(phi, data) - data.a)[:, None] * self._r(data) + self.ridge * phi

    def dQ_dphi(self, phi, data, v):
        R = self._r(data)
        p = self._p(phi, data)
        return R.T @ (p * (1.0 - p) * (R @ v)) / len(data) + self.ridge * v

    def predict(self, theta, x, a):
        return self.predict_grad(theta, x, a) @ np.asarray(theta, float)

    def predict_grad(self, theta, x, a):
        a = np.asarray(a, dtype=float)
        x = np.asarray(x, dtype=float).reshape(len(a), -1)
        return np.stack([x[:, 1], a], axis=1)

    def _fit_first_stage(self, data, phi, opts):
        n_params = 2 * data.num_instruments
        phi = np.zeros(n_params) if phi is None else phi.copy()
        it = 0
        if opts.solver == "adam":
            phi, it = _adam_solve(lambda f: self.Q(f, data), phi, opts)
            return phi, it
        R = self._r(data)
        n = len(data)
        for it in range(1, opts.max_iter + 1):
            p = _mlp.sigmoid(R @ phi)
            g = R.T @ (p - data.a) / n + self.ridge * phi
            if np.max(np.abs(g)) < opts.tol * 1e-2:
                break
            H = (R * (p * (1 - p))[:, None]).T @ R / n + self.ridge * np.eye(n_params)
            phi = phi - np.linalg.solve(H, g)
        return phi, it

    def fit(self, data, init=None, opts=FitOptions()):
        if len(data) == 0:
            raise EstimationError("empty dataset")
        phi0 = None if init is None else init.phi
        phi, it = self._fit_first_stage(data, phi0, opts)
        theta = self._second_stage(phi, data)
        st = self.state(theta, phi, data, iterations=it)
        return replace(st, converged=st.q_norm <= opts.tol and st.m_norm <= opts.tol)


def _adam_solve(moment, x, opts, b1=0.9, b2=0.999, eps=1e-8):
    """Drive ``moment(x)`` (a gradient field) to zero with Adam."""
    mom = np.zeros_like(x)
    vel = np.zeros_like(x)
    for t in range(1, opts.max_iter + 1):
        g = moment(x)
        if np.max(np.abs(g)) < opts.tol:
            return x, t - 1
        mom = b1 * mom + (1 - b1) * g
        vel = b2 * vel + (1 - b2) * g * g
        x = x - opts.lr * (mom / (1 - b1 ** t)) / (np.sqrt(vel / (1 - b2 ** t)) + eps)
    return x, opts.max_iter


class NeuralCIV(MomentSpec):
    """Conditional IV where f(x, a) and P(A=1 | x, z) are small sigmoid MLPs.

    The outcome net takes [x, a]; the density net takes [x, onehot(z)]. Second-
    order Jacobian products are central differences of the analytic gradients.
    """

    family = "neural_civ"

    def __init__(self, covariate_dim: int, num_instruments: int, hidden: int = 8, fd_step: float = 1e-5,
                 init_seed: int = 0):
        self.f_shape = _mlp.MLPShape(covariate_dim + 1, hidden, 1)
        self.d_shape = _mlp.MLPShape(covariate_dim + num_instruments, hidden, 1)
        self.dim_theta = self.f_shape.size
        self.fd_step = fd_step
        self.init_seed = init_seed

    def _din(self, data):
        Zh = np.zeros((len(data), data.num_instruments))
        Zh[np.arange(len(data)), data.z] = 1.0
        return np.hstack([data.x, Zh])

    def _fin(self, x, a):
        a = np.asarray(a, dtype=float)
        return np.hstack([np.asarray(x, dtype=float).reshape(len(a), -1), a[:, None]])

    def _density(self, phi, data):
        D = self._din(data)
        out, H = _mlp.forward(self.d_shape, phi, D)
        return _mlp.sigmoid(out[:, 0]), D, H

    def q(self, phi, data):
        p, D, H = self._density(phi, data)
        return _mlp.backward(self.d_shape, phi, D, H, (p - data.a)[:, None], per_sample=True)

    def _outcome_parts(self, theta, data):
        n = len(data)
        X1 = self._fin(data.x, np.ones(n))
        X0 = self._fin(data.x, np.zeros(n))
        f1, H1 = _mlp.forward(self.f_shape, theta, X1)
        f0, H0 = _mlp.forward(self.f_shape, theta, X0)
        return (f1[:, 0], X1, H1), (f0[:, 0], X0, H0)

    def _m_parts(self, theta, phi, data):
        p, D, Hd = self._density(phi, data)
        (f1, X1, H1), (f0, X0, H0) = self._outcome_parts(theta, data)
        F = p * f1 + (1 - p) * f0
        return p, D, Hd, f1, X1, H1, f0, X0, H0, F

    def m(self, theta, phi, data):
        p, _, _, f1, X1, H1, f0, X0, H0, F = self._m_parts(theta, phi, data)
        r = 2.0 * (F - data.y)
        g1 = _mlp.backward(self.f_shape, theta, X1, H1, (r * p)[:, None], per_sample=True)
        g0 = _mlp.backward(self.f_shape, theta, X0, H0, (r * (1 - p))[:, None], per_sample=True)
        return g1 + g0

    def M(self, theta, phi, data):
        p, _, _, f1, X1, H1, f0, X0, H0, F = self._m_parts(theta, phi, data)
        r = 2.0 * (F - data.y) / len(data)
        return (_mlp.backward(self.f_shape, theta, X1, H1, (r * p)[:, None])
                + _mlp.backward(self.f_shape, theta, X0, H0, (r * (1 - p))[:, None]))

    def Q(self, phi, data):
        p, D, H = self._density(phi, data)
        return _mlp.backward(self.d_shape, phi, D, H, ((p - data.a) / len(data))[:, None])

    def dQ_dphi(self, phi, data, v):
        h = self.fd_step
        return (self.Q(phi + h * v, data) - self.Q(phi - h * v, data)) / (2 * h)

    def dM_dtheta(self, theta, phi, data, v):
        h = self.fd_step
        return (self.M(theta + h * v, phi, data) - self.M(theta - h * v, phi, data)) / (2 * h)

    def dM_dphi(self, theta, phi, data, v):
        h = self.fd_step
        return (self.M(theta, phi + h * v, data) - self.M(theta, phi - h * v, data)) / (2 * h)

    def dM_dphi_T(self, theta, phi, data, u):
        # gradient in phi of <M_n(theta, phi), u>, through the density output p
        p, D, Hd, f1, X1, H1, f0, X0, H0, F = self._m_parts(theta, phi, data)
        ones = np.ones((len(data), 1))
        G1 = _mlp.backward(self.f_shape, theta, X1, H1, ones, per_sample=True) @ u
        G0 = _mlp.backward(self.f_shape, theta, X0, H0, ones, per_sample=True) @ u
        gF = p * G1 + (1 - p) * G0
        dp = 2.0 * (f1 - f0) * gF + 2.0 * (F - data.y) * (G1 - G0)
        grad_logit = dp * p * (1 - p) / len(data)
        return _mlp.backward(self.d_shape, phi, D, Hd, grad_logit[:, None])

    def predict(self, theta, x, a):
        out, _ = _mlp.forward(self.f_shape, np.asarray(theta, float), self._fin(x, a))
        return out[:, 0]

    def predict_grad(self, theta, x, a):
        X = self._fin(x, a)
        _, H = _mlp.forward(self.f_shape, theta, X)
        return _mlp.backward(self.f_shape, theta, X, H, np.ones((len(X), 1)), per_sample=True)

    def predict_hvp(self, theta, x, a, w, v):
        h = self.fd_step
        g = lambda t: w @ self.predict_grad(t, x, a)
        return (g(theta + h * v) - g(theta - h * v)) / (2 * h)

    def initial(self):
        rng = np.random.default_rng(self.init_seed)
        return self.f_shape.init(rng), self.d_shape.init(rng)

    def fit(self, data, init=None, opts=FitOptions(solver="adam")):
        if len(data) == 0:
            raise EstimationError("empty dataset")
        theta0, phi0 = self.initial() if init is None else (init.theta.copy(), init.phi.copy())
        phi, it1 = _adam_solve(lambda f: self.Q(f, data), phi0, opts)
        theta, it2 = _adam_solve(lambda t: self.M(t, phi, data), theta0, opts)
        st = self.state(theta, phi, data, iterations=it1 + it2)
        return replace(st, converged=st.q_norm <= opts.tol and st.m_norm <= opts.tol)


def spec_for(kind: str, family: Optional[str] = None, **kw) -> MomentSpec:
    """Default estimator family for a DGP kind."""
    if kind in ("iv", "binary_confounded"):
        return TwoStageLS("indicator")
    if kind == "misspec":
        return TwoStageLS("affine")
    if kind == "civ":
        if family == "neural_civ":
            return NeuralCIV(kw.get("covariate_dim", 2), kw["num_instruments"])
        return LogisticCIV()
    raise ValueError(f"unknown kind {kind!r}")


def fit_2sls(dataset: Dataset, features: str = "indicator", instrument: str = "onehot") -> EstimatorState:
    """Closed-form two-stage least squares on ``dataset``."""
    return TwoStageLS(features, instrument).fit(dataset)


def fit_two_stage(spec: MomentSpec, dataset: Dataset, init: Optional[EstimatorState] = None,
                  opts: Optional[FitOptions] = None) -> EstimatorState:
    """Solve Q_n(phi) = 0, then M_n(theta, phi) = 0, optionally warm-started.

    For ``TwoStageLS`` the generic path runs plain iterative solves on the two
    quadratic objectives, which must agree with the closed form.
    """
    if len(dataset) == 0:
        raise EstimationError("empty dataset")
    if isinstance(spec, TwoStageLS):
        opts = opts or FitOptions()
        return _fit_quadratic_generic(spec, dataset, init, opts)
    if opts is None:
        opts = FitOptions(solver="adam") if isinstance(spec, NeuralCIV) else FitOptions()
    return spec.fit(dataset, init, opts)


def _fit_quadratic_generic(spec, data, init, opts):
    # Both stages are linear in their parameters, so the moments are affine and
    # conjugate gradients on the Jacobian operators find the exact root.
    from .influence import InfluenceConfig, cg_solve

    d_phi = spec.design(data).shape[1]
    phi = np.zeros(d_phi) if init is None else init.phi.copy()
    theta = np.zeros(spec.dim_theta) if init is None else init.theta.copy()
    cfg = InfluenceConfig(cg_tol=1e-14, cg_max_iter=10 * (d_phi + spec.dim_theta) + 10)
    it = 0
    for _ in range(3):
        r = spec.Q(phi, data)
        if np.max(np.abs(r)) <= opts.tol * 1e-4:
            break
        step, _, k = cg_solve(lambda v: spec.dQ_dphi(phi, data, v), -r, cfg)
        phi = phi + step
        it += k
    for _ in range(3):
        r = spec.M(theta, phi, data)
        if np.max(np.abs(r)) <= opts.tol * 1e-4:
            break
        step, _, k = cg_solve(lambda v: spec.dM_dtheta(theta, phi, data, v), -r, cfg)
        theta = theta + step
        it += k
    st = spec.state(theta, phi, data, iterations=it)
    return replace(st, converged=st.q_norm <= opts.tol and st.m_norm <= opts.tol)


def predict_f(state: EstimatorState, x, a):
    """Counterfactual prediction f(x, a; theta) (scalar in, scalar out)."""
    scalar = np.ndim(a) == 0
    a_arr = np.atleast_1d(np.asarray(a, dtype=float))
    x_arr = np.zeros((len(a_arr), 0)) if x is None or np.size(x) == 0 else np.asarray(x, float).reshape(len(a_arr), -1)
    out = state.spec.predict(state.theta, x_arr, a_arr)
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class PredictionMSE:
    """(1/M) sum_j (target_j - f(x_j, a_j; theta))^2 over a fixed evaluation set."""

    spec: MomentSpec
    x: np.ndarray
    a: np.ndarray
    target: np.ndarray

    @classmethod
    def proxy(cls, reference: EstimatorState, eval_set: EvalSet):
        target = reference.spec.predict(reference.theta, eval_set.x, eval_set.a)
        return cls(reference.spec, eval_set.x, eval_set.a, target)

    @classmethod
    def truth(cls, spec: MomentSpec, dgp, eval_set: Optional[EvalSet] = None):
        ev = dgp.eval_set if eval_set is None else eval_set
        return cls(spec, ev.x, ev.a, dgp.counterfactual(ev.x, ev.a))

    def value(self, theta):
        return float(np.mean((self.target - self.spec.predict(theta, self.x, self.a)) ** 2))

    def grad(self, theta):
        r = self.spec.predict(theta, self.x, self.a) - self.target
        return 2.0 * self.spec.predict_grad(theta, self.x, self.a).T @ r / len(self.a)

    def hvp(self, theta, v):
        Gm = self.spec.predict_grad(theta, self.x, self.a)
        r = self.spec.predict(theta, self.x, self.a) - self.target
        return 2.0 * (Gm.T @ (Gm @ v) + self.spec.predict_hvp(theta, self.x, self.a, r, v)) / len(self.a)

    def gram(self, theta=None):
        """Gauss-Newton matrix (1/M) sum grad f grad f^T (exact Hessian / 2 for linear families)."""
        Gm = self.spec.predict_grad(theta, self.x, self.a)
        return Gm.T @ Gm / len(self.a)


@dataclass(frozen=True)
class ParameterMSE:
    """Squared parameter distance (theta - ref)^T (theta - ref)."""

    ref: np.ndarray

    def value(self, theta):
        d = np.asarray(theta, float) - self.ref
        return float(d @ d)

    def grad(self, theta):
        return 2.0 * (np.asarray(theta, float) - self.ref)

    def hvp(self, theta, v):
        return 2.0 * np.asarray(v, float)


def proxy_mse(state_sub: EstimatorState, state_full: EstimatorState, eval_set: EvalSet) -> float:
    """Mean squared gap between subset-fit and full-fit predictions on the evaluation set."""
    if state_sub.spec.family != state_full.spec.family:
        raise ValueError("states come from different estimator families")
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")
    return PredictionMSE.proxy(state_full, eval_set).value(state_sub.theta)


def moment_eval(spec: MomentSpec, state: EstimatorState, sample, num_instruments: Optional[int] = None):
    """Per-sample (q, m) at the state's parameters.

    ``sample`` is a ``Sample`` or a one-row ``Dataset``. The instrument count
    defaults to what the fitted nuisance vector implies.
    """
    if isinstance(sample, Dataset):
        ds = sample
    else:
        if num_instruments is None:
            num_instruments = _instruments_from_state(spec, state, np.size(sample.x))
        ds = Dataset.from_arrays([sample.z], [sample.a], [sample.y], x=np.reshape(sample.x, (1, -1)),
                                 num_instruments=num_instruments)
    return spec.q(state.phi, ds)[0], spec.m(state.theta, state.phi, ds)[0]


def _instruments_from_state(spec, state, d):
    if isinstance(spec, TwoStageLS):
        return len(state.phi) if spec.instrument == "onehot" else None
    if isinstance(spec, LogisticCIV):
        return len(state.phi) // 2
    return spec.d_shape.d_in - d
