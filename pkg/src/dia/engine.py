"""Policy-gradient estimators and the adaptive allocation loop.

``optimize_policy`` learns the next instrument policy from the data collected
so far. Each Adam step builds the effective policy (past average mixed with
the learnable policy according to the spent budget), resamples the logged
data towards it with multi-rejection, fits the estimator on B random subsets,
and combines the policy score with each subset sample's influence on the
proxy MSE. ``run_dia`` alternates that optimisation with data collection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import rng as rngmod
from ._core import kernels
from .estimators import (EstimationError, EstimatorState, FitOptions, MomentSpec, PredictionMSE, TwoStageLS,
                         spec_for)
from .influence import InfluenceConfig, InfluenceError, InfluenceReport, influence_all
from .policy import MLPPolicy, MixturePolicy, Policy, PolicyRegistry, SoftmaxPolicy, effective_policy, register
from .sampling import AcceptanceError, ResampleConfig
from .sim import Dataset, DgpInstance, EvalSet, sample_batch


class OptimizationError(RuntimeError):
    """The policy optimiser produced a non-finite gradient."""


@dataclass(frozen=True)
class GradientEstimate:
    gradient: np.ndarray
    tag: str
    contributions: Optional[np.ndarray] = None


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, dim: int, lr: float = 0.05, **kw) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim), 0, lr, **kw)


def adam_step(state: AdamState, weights, gradient):
    """One bias-corrected Adam descent step; returns (new state, new weights)."""
    g = np.asarray(gradient, dtype=float)
    w = np.asarray(weights, dtype=float)
    if g.shape != w.shape or g.shape != state.m.shape:
        raise ValueError("gradient, weights and optimiser state must share a shape")
    if not np.all(np.isfinite(g)):
        raise OptimizationError("non-finite gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = m / (1 - state.beta1 ** t)
    vhat = v / (1 - state.beta2 ** t)
    w_new = w - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return replace(state, m=m, v=v, t=t), w_new


# --- gradient estimators ------------------------------------------------------------------------

def grad_naive(dataset: Dataset, policy: Policy, mse_value: float) -> GradientEstimate:
    """REINFORCE: MSE(theta(D_n)) times the summed score of the collecting policy."""
    S = policy.score(dataset.x, dataset.z)
    return GradientEstimate(mse_value * S.sum(axis=0), "naive", mse_value * S)


def grad_cv(dataset: Dataset, policy: Policy, full_mse: float, loo_mses) -> GradientEstimate:
    """Leave-one-out control variate: sum_i score_i (MSE(D_n) - MSE(D_n minus i))."""
    loo = np.asarray(loo_mses, dtype=float)
    if loo.shape != (len(dataset),):
        raise ValueError("need one leave-one-out MSE per sample")
    S = policy.score(dataset.x, dataset.z)
    c = S * (full_mse - loo)[:, None]
    return GradientEstimate(c.sum(axis=0), "cv", c)


def grad_if(subsets: Sequence[Dataset], eff_policy: Policy, influence_reports) -> GradientEstimate:
    """Average over subsets of sum_i score_i * predicted LOO MSE delta.

    ``influence_reports`` holds an ``InfluenceReport`` or a plain array of LOO
    deltas per subset.
    """
    if len(subsets) != len(influence_reports):
        raise ValueError("one influence report per subset is required")
    per = []
    for ds, rep in zip(subsets, influence_reports):
        delta = rep.loo_delta if isinstance(rep, InfluenceReport) else np.asarray(rep, dtype=float)
        if len(delta) != len(ds):
            raise ValueError("influence report is not aligned with its subset")
        per.append(eff_policy.score(ds.x, ds.z).T @ delta)
    per = np.asarray(per)
    return GradientEstimate(per.mean(axis=0), "if", per)


def exact_loo_thetas(spec: MomentSpec, dataset: Dataset) -> np.ndarray:
    """Exact leave-one-out refits, one row per left-out sample (NaN when singular)."""
    if isinstance(spec, TwoStageLS) and spec.instrument == "onehot":
        return kernels.grouped_loo(dataset.z, dataset.a, dataset.y, dataset.num_instruments, spec.code)
    if spec.family != "twostage_ls":
        raise ValueError("exact leave-one-out refits are restricted to closed-form families")
    out = np.full((len(dataset), spec.dim_theta), np.nan)
    for i in range(len(dataset)):
        keep = np.delete(np.arange(len(dataset)), i)
        try:
            out[i] = spec.fit(dataset.take(keep)).theta
        except EstimationError:
            pass
    return out


def loo_mses_exact(spec: MomentSpec, dataset: Dataset, mse) -> np.ndarray:
    thetas = exact_loo_thetas(spec, dataset)
    return np.array([mse.value(t) if np.all(np.isfinite(t)) else np.nan for t in thetas])


# --- policy optimisation ------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizeOptions:
    steps: int = 200
    lr: float = 0.05
    grad_tol: float = 1e-4
    patience: int = 10
    resample: ResampleConfig = field(default_factory=ResampleConfig)
    # first-order influences cancel within instrument groups of a just-identified design
    influence: InfluenceConfig = field(default_factory=lambda: InfluenceConfig(order=2))
    min_k: int = 32
    max_shrinks: int = 3
    warm_start: bool = True
    policy_form: str = "softmax_logits"


@dataclass(frozen=True)
class OptimizeResult:
    policy: Policy
    objective: np.ndarray
    grad_norms: np.ndarray
    steps: int
    k_used: int
    accepted: float
    skipped_fits: int


def _filtered_subsets(ratios, rho_max, k, B, rng):
    """Per-subset multi-rejection pass followed by a uniform size-k draw from the survivors."""
    n = len(ratios)
    xi = rng.random((B, n))
    ok = xi * rho_max <= ratios[None, :]
    counts = ok.sum(axis=1)
    if np.any(counts < k):
        return None, counts
    keys = np.where(ok, rng.random((B, n)), 2.0)
    return np.argpartition(keys, k - 1, axis=1)[:, :k], counts


def _init_policy(form, dgp_dim, m, init, rng):
    if init is not None:
        return init
    if form == "softmax_logits":
        return SoftmaxPolicy(m)
    return MLPPolicy(dgp_dim, m, rng=rng)


def optimize_policy(dataset: Dataset, registry: PolicyRegistry, eval_set: EvalSet, budget_N: int,
                    opts: OptimizeOptions = OptimizeOptions(), spec: Optional[MomentSpec] = None,
                    init_policy: Optional[Policy] = None, rng=None, details: bool = False):
    """Learn the next allocation policy (returns the learnable policy).

    With ``details=True`` an ``OptimizeResult`` with the objective trace is
    returned instead.
    """
    n = len(dataset)
    if budget_N < n:
        raise ValueError("budget_N must be at least the collected sample count")
    rng = np.random.default_rng(opts.resample.seed) if rng is None else rng
    spec = spec or TwoStageLS("indicator")
    m = dataset.num_instruments
    policy = _init_policy(opts.policy_form, dataset.x.shape[1], m, init_policy, rng)
    ref = spec.fit(dataset)
    mse = PredictionMSE.proxy(ref, eval_set)
    fast = isinstance(spec, TwoStageLS) and spec.instrument == "onehot"
    if fast:
        G = mse.gram(ref.theta)
    avg = registry.average_probs(dataset.x)[np.arange(n), dataset.z]
    c_past = n / budget_N
    c_learn = 1.0 - c_past
    k0 = opts.resample.subset_size(n)
    B = opts.resample.B
    adam = AdamState.zeros(len(policy.weights), opts.lr)
    warm = [None] * B
    objective, norms = [], []
    calm = 0
    skipped = 0
    k_used, accepted = k0, float("nan")
    steps = 0
    for step in range(opts.steps):
        if c_learn == 0:
            break
        pw_all = np.asarray(policy.probs(dataset.x if policy.input_dim else np.zeros((n, 0))))
        pw = pw_all[np.arange(n), dataset.z]
        p_eff = c_past * avg + c_learn * pw
        ratios = p_eff / avg
        rho_max = float(ratios.max())
        k = k0
        subsets, counts = _filtered_subsets(ratios, rho_max, k, B, rng)
        shrinks = 0
        while subsets is None:
            if shrinks >= opts.max_shrinks or k <= min(opts.min_k, k0):
                raise AcceptanceError(int(counts.min()), k)
            k = max(k // 2, min(opts.min_k, k0))
            shrinks += 1
            subsets, counts = _filtered_subsets(ratios, rho_max, k, B, rng)
        k_used, accepted = k, float(counts.mean())
        if fast:
            thetas, vals, loo, status = kernels.subset_step(dataset.z, dataset.a, dataset.y, m, spec.code, subsets,
                                                             G, ref.theta, opts.influence.order)
            good = status == 0
        else:
            vals = np.full(B, np.nan)
            loo = np.zeros((B, k))
            good = np.zeros(B, dtype=bool)
            for b in range(B):
                sub = dataset.take(subsets[b])
                try:
                    st = spec.fit(sub, init=warm[b] if opts.warm_start else None)
                    rep = influence_all(st, sub, mse, opts.influence, with_theta=opts.influence.order == 2)
                except (EstimationError, InfluenceError):
                    continue
                warm[b] = st
                vals[b] = mse.value(st.theta)
                loo[b] = rep.loo_delta
                good[b] = True
        skipped += int((~good).sum())
        if not np.any(good):
            raise EstimationError("every subset fit failed")
        grads = []
        for b in np.flatnonzero(good):
            idx = subsets[b]
            Xb = dataset.x[idx] if policy.input_dim else np.zeros((len(idx), 0))
            S = policy.score(Xb, dataset.z[idx]) * (c_learn * pw[idx] / p_eff[idx])[:, None]
            grads.append(S.T @ loo[b])
        g = np.mean(grads, axis=0)
        objective.append(float(np.nanmean(vals[good])))
        # scale-free stopping test: gradient of log(objective)
        scale = objective[-1] if objective[-1] > 0 else 1.0
        gnorm = float(np.max(np.abs(g))) / scale if g.size else 0.0
        norms.append(gnorm)
        adam, w = adam_step(adam, policy.weights, g)
        policy = policy.with_weights(w)
        steps = step + 1
        calm = calm + 1 if gnorm < opts.grad_tol else 0
        if calm >= opts.patience:
            break
    if not details:
        return policy
    return OptimizeResult(policy, np.asarray(objective), np.asarray(norms), steps, k_used, accepted, skipped)


# --- adaptive allocation ------------------------------------------------------------------------

@dataclass(frozen=True)
class AllocationRecord:
    allocation: int
    policy: Policy
    samples: int
    mse: float
    accepted: float = float("nan")
    k_used: int = 0
    grad_steps: int = 0


@dataclass(frozen=True)
class AllocationTrace:
    records: tuple
    dataset: Dataset
    registry: PolicyRegistry
    final_state: Optional[EstimatorState]

    @property
    def final_mse(self) -> float:
        return self.records[-1].mse

    def mse_curve(self) -> np.ndarray:
        return np.array([r.mse for r in self.records])


def _true_mse(spec, dgp, data):
    try:
        st = spec.fit(data)
    except EstimationError:
        return None, float("nan")
    return st, PredictionMSE.truth(spec, dgp).value(st.theta)


def run_dia(dgp: DgpInstance, K_allocations: int, batch_n: int, opts: OptimizeOptions = OptimizeOptions(),
            seed: int = 0, trial: int = 0, spec: Optional[MomentSpec] = None, adaptive: bool = True) -> AllocationTrace:
    """Collect K batches; the first uniformly, the rest under freshly optimised policies.

    Batch j is sampled from stream (seed, trial, j, 0) and optimised with
    stream (seed, trial, j, 1), so runs with ``adaptive=False`` (all-uniform
    collection) share every random draw with the adaptive arm.
    """
    if K_allocations < 1 or batch_n < 1:
        raise ValueError("K_allocations and batch_n must be positive")
    spec = spec or spec_for(dgp.kind, num_instruments=dgp.num_instruments, covariate_dim=dgp.covariate_dim)
    N = K_allocations * batch_n
    m = dgp.num_instruments
    uniform = SoftmaxPolicy(m)
    registry = register(PolicyRegistry(), uniform, batch_n)
    data = sample_batch(dgp, uniform, batch_n, registry, rngmod.stream(seed, trial, 0, 0), policy_id=0)
    state, err = _true_mse(spec, dgp, data)
    records = [AllocationRecord(0, uniform, len(data), err)]
    learned = None
    for j in range(1, K_allocations):
        if adaptive:
            res = optimize_policy(data, registry, dgp.eval_set, N, opts, spec=spec,
                                  init_policy=learned if opts.warm_start else None,
                                  rng=rngmod.stream(seed, trial, j, 1), details=True)
            learned = res.policy
            pol = learned
            info = dict(accepted=res.accepted, k_used=res.k_used, grad_steps=res.steps)
        else:
            pol = uniform
            info = {}
        registry = register(registry, pol, batch_n)
        batch = sample_batch(dgp, pol, batch_n, registry, rngmod.stream(seed, trial, j, 0), policy_id=len(registry) - 1)
        data = data.concat(batch)
        state, err = _true_mse(spec, dgp, data)
        records.append(AllocationRecord(j, pol, len(data), err, **info))
    return AllocationTrace(tuple(records), data, registry, state)


# --- gradient diagnostics -----------------------------------------------------------------------

def gradient_replicates(dgp: DgpInstance, policy: SoftmaxPolicy, n: int, reps: int, seed: int = 0,
                        spec: Optional[MomentSpec] = None, order: int = 1):
    """Replicate the naive, CV and IF gradient estimates on fresh datasets of size n.

    Returns a dict of (reps, dim) arrays keyed by estimator tag. MSE is the
    true prediction MSE; CV uses exact leave-one-out refits.
    """
    spec = spec or spec_for(dgp.kind)
    registry = register(PolicyRegistry(), policy, n)
    truth = PredictionMSE.truth(spec, dgp)
    out = {"naive": [], "cv": [], "if": []}
    cfg = InfluenceConfig(order=order)
    for r in range(reps):
        data = sample_batch(dgp, policy, n, registry, rngmod.stream(seed, r), policy_id=0)
        try:
            st = spec.fit(data)
        except EstimationError:
            continue
        full = truth.value(st.theta)
        loo = loo_mses_exact(spec, data, truth)
        if np.any(~np.isfinite(loo)):
            continue
        rep = influence_all(st, data, truth, cfg)
        out["naive"].append(grad_naive(data, policy, full).gradient)
        out["cv"].append(grad_cv(data, policy, full, loo).gradient)
        out["if"].append(grad_if([data], policy, [rep]).gradient)
    return {k: np.asarray(v) for k, v in out.items()}


def fd_gradient(dgp: DgpInstance, policy: SoftmaxPolicy, n: int, reps: int, h: float = 0.05, seed: int = 0,
                spec: Optional[MomentSpec] = None):
    """Central finite differences of E[MSE(theta(D_n))] in each logit with common random numbers.

    Returns (mean, stderr) arrays over the policy weights.
    """
    spec = spec or spec_for(dgp.kind)
    truth = PredictionMSE.truth(spec, dgp)
    w = policy.weights
    diffs = np.full((reps, len(w)), np.nan)
    for j in range(len(w)):
        e = np.zeros(len(w))
        e[j] = h
        pols = [policy.with_weights(w + e), policy.with_weights(w - e)]
        for r in range(reps):
            vals = []
            for pol in pols:
                reg = register(PolicyRegistry(), pol, n)
                data = sample_batch(dgp, pol, n, reg, rngmod.stream(seed, r), policy_id=0)
                try:
                    vals.append(truth.value(spec.fit(data).theta))
                except EstimationError:
                    vals.append(np.nan)
            diffs[r, j] = (vals[0] - vals[1]) / (2 * h)
    ok = np.all(np.isfinite(diffs), axis=1)
    d = diffs[ok]
    return d.mean(axis=0), d.std(axis=0, ddof=1) / math.sqrt(len(d))
