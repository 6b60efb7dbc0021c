"""Rejection resampling of logged data and subset-based MSE estimators.

Multi-rejection compares the target policy against the sample-count weighted
average of every policy that collected data, so a sample only needs support
under *some* past policy. Accepted samples are distributed as if collected
under the target, and random subsets of them give an incomplete U-statistic
estimate of the target's expected MSE at subset size k.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._core import kernels
from .estimators import EstimationError, EstimatorState, MomentSpec, PredictionMSE, TwoStageLS
from .policy import Policy, PolicyRegistry, SupportError
from .sim import Dataset, EvalSet


class AcceptanceError(RuntimeError):
    """Too few samples survived rejection for the requested subset size."""

    def __init__(self, accepted: int, k: int):
        super().__init__(f"only {accepted} samples accepted, need k={k}")
        self.accepted = accepted
        self.k = k


@dataclass(frozen=True)
class ResampleConfig:
    alpha: float = 0.65
    B: int = 16
    rho_max_mode: str = "empirical_supremum"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.B < 1:
            raise ValueError("B must be positive")
        if self.rho_max_mode not in ("known", "empirical_supremum"):
            raise ValueError("rho_max_mode is 'known' or 'empirical_supremum'")

    def subset_size(self, n: int) -> int:
        return min(n, math.ceil(n ** self.alpha))


@dataclass(frozen=True)
class AcceptanceResult:
    accepted: np.ndarray
    ratios: np.ndarray
    rho_max: float
    failed: bool = False
    exact_rho_max: Optional[float] = None

    @property
    def n_accepted(self) -> int:
        return len(self.accepted)


def _policy_probs(policy: Policy, X):
    return np.asarray(policy.probs(X if policy.input_dim else np.zeros((len(X), 0))))


def multi_importance_ratios(dataset: Dataset, target: Policy, registry: PolicyRegistry) -> np.ndarray:
    """rho_bar(S_i) = target(z_i|x_i) / average past propensity, for every sample."""
    rows = np.arange(len(dataset))
    num = _policy_probs(target, dataset.x)[rows, dataset.z]
    den = registry.average_probs(dataset.x)[rows, dataset.z]
    bad = (den <= 0) & (num > 0)
    if np.any(bad):
        raise SupportError("target puts mass where no past policy did")
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def multi_importance_ratio(sample, target: Policy, registry: PolicyRegistry) -> float:
    """Scalar version of :func:`multi_importance_ratios` for a single ``Sample``."""
    x = np.reshape(np.asarray(sample.x, dtype=float), (1, -1))
    num = _policy_probs(target, x)[0, sample.z]
    den = registry.average_probs(x)[0, sample.z]
    if den <= 0:
        if num > 0:
            raise SupportError("target puts mass where no past policy did")
        return 0.0
    return float(num / den)


def exact_rho_max(target: Policy, registry: PolicyRegistry) -> float:
    """max_z target(z) / average(z) over the instrument grid (unconditional policies)."""
    if target.input_dim or any(p.input_dim for p, _ in registry.entries):
        raise ValueError("exact supremum is only available for unconditional policies")
    X = np.zeros((1, 0))
    num = _policy_probs(target, X)[0]
    den = registry.average_probs(X)[0]
    if np.any((den <= 0) & (num > 0)):
        raise SupportError("target puts mass where no past policy did")
    return float(np.max(np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)))


def _accept(ratios, rho_max, rng):
    xi = rng.random(len(ratios))
    return np.flatnonzero(xi * rho_max <= ratios)


def multi_rejection_filter(dataset: Dataset, target: Policy, registry: PolicyRegistry,
                           cfg: ResampleConfig = ResampleConfig(), rng=None, k: Optional[int] = None,
                           ratios: Optional[np.ndarray] = None) -> AcceptanceResult:
    """Accept each sample independently with probability rho_bar / rho_bar_max.

    ``ratios`` may be passed when already computed for this target.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    r = multi_importance_ratios(dataset, target, registry) if ratios is None else ratios
    exact = None
    if target.input_dim == 0 and all(p.input_dim == 0 for p, _ in registry.entries):
        exact = exact_rho_max(target, registry)
    if cfg.rho_max_mode == "known":
        if exact is None:
            raise ValueError("known rho_max needs unconditional policies")
        rho_max = exact
    else:
        rho_max = float(r.max()) if len(r) else 0.0
    if rho_max <= 0:
        raise AcceptanceError(0, k or 1)
    acc = _accept(r, rho_max, rng)
    if len(acc) == 0:
        raise AcceptanceError(0, k or 1)
    failed = k is not None and len(acc) < k
    return AcceptanceResult(acc, r, rho_max, failed, exact)


def single_rejection_filter(dataset: Dataset, target: Policy, registry: PolicyRegistry, rng) -> AcceptanceResult:
    """Per-policy rejection: each sample is compared with the policy that collected it.

    The bound for policy j is the exact supremum of target / pi_j over the
    instrument grid (unconditional) or the empirical maximum over its samples.
    """
    rows = np.arange(len(dataset))
    num = _policy_probs(target, dataset.x)[rows, dataset.z]
    ratios = np.zeros(len(dataset))
    bound = np.zeros(len(dataset))
    for j, (pol, _) in enumerate(registry.entries):
        sel = dataset.policy_id == j
        if not np.any(sel):
            continue
        den = _policy_probs(pol, dataset.x[sel])[np.arange(sel.sum()), dataset.z[sel]]
        if np.any(den <= 0):
            raise SupportError("logged sample has zero propensity under its own policy")
        ratios[sel] = num[sel] / den
        if pol.input_dim == 0 and target.input_dim == 0:
            pj = _policy_probs(pol, np.zeros((1, 0)))[0]
            pt = _policy_probs(target, np.zeros((1, 0)))[0]
            if np.any((pj <= 0) & (pt > 0)):
                raise SupportError("target not covered by a collecting policy")
            bound[sel] = np.max(np.where(pj > 0, pt / np.where(pj > 0, pj, 1.0), 0.0))
        else:
            bound[sel] = ratios[sel].max()
    xi = rng.random(len(dataset))
    acc = np.flatnonzero((bound > 0) & (xi * bound <= ratios))
    return AcceptanceResult(acc, ratios, float(bound.max()) if len(bound) else 0.0, False, None)


def draw_subsets(accepted, k: int, B: int, rng) -> np.ndarray:
    """B independent uniform size-k subsets (without replacement) of ``accepted``."""
    accepted = np.asarray(accepted, dtype=np.intp)
    if len(accepted) < k:
        raise AcceptanceError(len(accepted), k)
    if k <= 0 or B <= 0:
        raise ValueError("k and B must be positive")
    if k == len(accepted):
        return np.tile(accepted, (B, 1))
    keys = rng.random((B, len(accepted)))
    pick = np.argpartition(keys, k - 1, axis=1)[:, :k]
    return accepted[pick]


def failure_bound(n: int, rho_max: float) -> float:
    """Upper bound exp(-n / (8 rho_max)) on Pr(N' < k) for k <= n / (2 rho_max)."""
    return math.exp(-n / (8.0 * rho_max))


def max_alpha(n: int, rho_max: float, grid=(0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5)) -> Optional[float]:
    """Largest alpha in ``grid`` whose subset size stays below the expected acceptances n / rho_max."""
    for a in grid:
        if math.ceil(n ** a) < n / rho_max:
            return a
    return None


@dataclass(frozen=True)
class SubsetEstimate:
    value: float
    values: np.ndarray
    weights: np.ndarray
    failures: int
    k: int
    n_accepted: int


def _as_fit(estimator_fit) -> Callable[[Dataset], EstimatorState]:
    if isinstance(estimator_fit, MomentSpec):
        return estimator_fit.fit
    return estimator_fit


def _subset_mses(dataset: Dataset, estimator_fit, subsets, reference_state: EstimatorState, eval_set: EvalSet):
    """Proxy MSE of the fit on each subset (NaN where the fit fails)."""
    mse = PredictionMSE.proxy(reference_state, eval_set)
    if isinstance(estimator_fit, TwoStageLS) and estimator_fit.instrument == "onehot":
        ref = np.asarray(reference_state.theta, dtype=float)
        _, vals, _, status = kernels.subset_step(dataset.z, dataset.a, dataset.y, dataset.num_instruments,
                                                 estimator_fit.code, np.ascontiguousarray(subsets, dtype=np.int64),
                                                 mse.gram(ref), ref, 1)
        return np.where(status == 0, vals, np.nan)
    fit = _as_fit(estimator_fit)
    vals = np.full(len(subsets), np.nan)
    for b, idx in enumerate(subsets):
        try:
            vals[b] = mse.value(fit(dataset.take(idx)).theta)
        except EstimationError:
            pass
    return vals


def rs_mse_estimate(dataset: Dataset, target: Policy, registry: PolicyRegistry, estimator_fit,
                    reference_state: EstimatorState, eval_set: EvalSet, cfg: ResampleConfig = ResampleConfig(),
                    rng=None, k: Optional[int] = None, details: bool = False):
    """Mean proxy MSE of fits on B subsets of multi-rejection-accepted samples."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    k = cfg.subset_size(len(dataset)) if k is None else k
    acc = multi_rejection_filter(dataset, target, registry, cfg, rng, k=k)
    if acc.failed:
        raise AcceptanceError(acc.n_accepted, k)
    subsets = draw_subsets(acc.accepted, k, cfg.B, rng)
    vals = _subset_mses(dataset, estimator_fit, subsets, reference_state, eval_set)
    ok = np.isfinite(vals)
    if not ok.any():
        raise EstimationError("every subset fit failed")
    vals = vals[ok]
    out = SubsetEstimate(float(vals.mean()), vals, np.ones(len(vals)), int((~ok).sum()), k, acc.n_accepted)
    return out if details else out.value


def is_mse_estimate(dataset: Dataset, target: Policy, estimator_fit, reference_state: EstimatorState,
                    eval_set: EvalSet, cfg: ResampleConfig = ResampleConfig(), rng=None, k: Optional[int] = None,
                    log_weight_cap: float = 700.0, details: bool = False):
    """Importance-weighted subset estimate: mean of (prod_i rho_i) * proxy MSE over B subsets.

    rho_i = target(z_i | x_i) / logged propensity; products are summed in log space.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    k = cfg.subset_size(len(dataset)) if k is None else k
    rows = np.arange(len(dataset))
    num = _policy_probs(target, dataset.x)[rows, dataset.z]
    if np.any(dataset.propensity <= 0):
        raise SupportError("logged propensity must be positive")
    with np.errstate(divide="ignore"):
        logr = np.log(num) - np.log(dataset.propensity)
    subsets = draw_subsets(np.arange(len(dataset)), k, cfg.B, rng)
    lw = logr[subsets].sum(axis=1)
    if np.any(lw > log_weight_cap):
        raise OverflowError("importance weight exceeds the log-weight cap")
    wts = np.exp(lw)
    live = wts > 0
    vals = np.zeros(len(subsets))
    vals[live] = _subset_mses(dataset, estimator_fit, subsets[live], reference_state, eval_set)
    ok = np.isfinite(vals)
    if not ok.any():
        raise EstimationError("every subset fit failed")
    vals, wts = vals[ok], wts[ok]
    out = SubsetEstimate(float(np.mean(wts * vals)), vals, wts, int((~ok).sum()), k, len(dataset))
    return out if details else out.value


# --- incomplete U-statistic algebra ------------------------------------------------------------

def u_statistic_variance(eta, n: int, k: int) -> float:
    """Var(U) = C(n,k)^{-1} sum_{c=1..k} C(k,c) C(n-k,k-c) eta_c, with eta[c-1] = eta_c."""
    tot = sum(math.comb(k, c) * math.comb(n - k, k - c) * eta[c - 1] for c in range(1, k + 1))
    return tot / math.comb(n, k)


def incomplete_u_variance(var_u: float, eta_k: float, B: int) -> float:
    """Var of the mean over B iid uniform subsets: (1 - 1/B) Var(U) + eta_k / B."""
    return (1.0 - 1.0 / B) * var_u + eta_k / B


def is_deterministic_variance(alpha_k: float, rho_max: float, n: int, k: int) -> float:
    """Complete-U variance of the importance-weighted MSE estimate for a deterministic DGP."""
    eta = [alpha_k ** 2 * (rho_max ** c - 1.0) for c in range(1, k + 1)]
    return u_statistic_variance(eta, n, k)


@dataclass(frozen=True)
class EnumeratedUStatistic:
    """Exact moments of a U-statistic over a finite sample space, by enumeration."""

    mean: float
    var_u: float
    eta: np.ndarray
    cond_subset_var: float

    def var_incomplete(self, B: int) -> float:
        """Exact Var of the B-subset estimate: Var(U) + E[Var(h | data)] / B."""
        return self.var_u + self.cond_subset_var / B


def enumerate_u_statistic(kernel, support, probs, n: int, k: int) -> EnumeratedUStatistic:
    """Enumerate every dataset of size n over ``support`` (iid with ``probs``).

    ``kernel`` maps a tuple of k support values to a real. Returns the exact
    variance of the complete U-statistic, the Hoeffding terms eta_c (covariance
    of kernels sharing c points) and the expected within-dataset variance of the
    kernel over uniformly chosen subsets.
    """
    support = list(support)
    probs = np.asarray(probs, dtype=float)
    subsets = list(itertools.combinations(range(n), k))
    # kernel values on every ordered k-tuple of support indices
    hk = {}
    for t in itertools.product(range(len(support)), repeat=k):
        hk[t] = float(kernel(tuple(support[i] for i in t)))
    e1 = e2 = ecv = 0.0
    for data in itertools.product(range(len(support)), repeat=n):
        pr = float(np.prod(probs[list(data)]))
        if pr == 0.0:
            continue
        vals = np.array([hk[tuple(data[i] for i in s)] for s in subsets])
        u = vals.mean()
        e1 += pr * u
        e2 += pr * u * u
        ecv += pr * vals.var()
    var_u = e2 - e1 * e1
    # eta_c = Cov(h(S), h(S')) for S, S' sharing c coordinates
    mu = sum(np.prod(probs[list(t)]) * v for t, v in hk.items())
    eta = np.zeros(k)
    for c in range(1, k + 1):
        acc = 0.0
        for shared in itertools.product(range(len(support)), repeat=c):
            ps = float(np.prod(probs[list(shared)]))
            # E[h | first c coordinates = shared]
            cond = 0.0
            for rest in itertools.product(range(len(support)), repeat=k - c):
                cond += float(np.prod(probs[list(rest)])) * hk[shared + rest]
            acc += ps * cond * cond
        eta[c - 1] = acc - mu * mu
    return EnumeratedUStatistic(float(e1), float(var_u), eta, float(ecv))
