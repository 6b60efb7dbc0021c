"""Synthetic data-generating processes with known ground truth.

Four kinds are supported:

``iv``
    One-hot instrument, binary treatment with clipped-linear compliance, a
    Gaussian confounder and heteroskedastic outcome noise.
``civ``
    As ``iv`` but with covariates (X1 binary, X2 real) where X1 flips the
    compliance pattern.
``misspec``
    Real-valued treatment and an outcome quadratic in the treatment, so a
    linear second stage is misspecified.
``binary_confounded``
    Two instruments with compliance (0, 1); with ``sigma_u = 0`` the
    treatment equals the instrument.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .policy import Policy, PolicyRegistry, SoftmaxPolicy

KINDS = ("iv", "civ", "misspec", "binary_confounded")

_DEFAULT_THETA = {"iv": (1.0, 2.0), "binary_confounded": (1.0, 2.0), "civ": (1.0,), "misspec": (0.5,)}


class ConfigError(ValueError):
    """Invalid data-generating or experiment configuration."""


def clip01(v):
    return np.minimum(np.maximum(v, 0.0), 1.0)


def gamma_pattern(m: int, rng: np.random.Generator) -> np.ndarray:
    """Compliance strengths: a few strong, a few weak, the rest evenly spaced, shuffled."""
    s = math.ceil(0.05 * m)
    if 2 * s >= m:
        g = np.array([0.95] * s + [0.05] * (m - s), dtype=float)[:m]
    else:
        g = np.concatenate([np.full(s, 0.95), np.full(s, 0.05), np.linspace(0.05, 0.95, m - 2 * s + 2)[1:-1]])
    return rng.permutation(g)


@dataclass
class DgpConfig:
    kind: str = "iv"
    num_instruments: int = 2
    theta0: Optional[list] = None
    gamma: Optional[list] = None
    sigma_u: float = 0.5
    sigma0: float = 0.1
    sigma1: float = 1.0
    sigma_a: float = 0.1
    sigma_y: float = 0.1
    covariate_dim: int = 0
    eval_size: int = 1000

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}")
        if self.kind == "binary_confounded" and self.num_instruments != 2:
            raise ConfigError("binary_confounded uses exactly two instruments")
        if int(self.num_instruments) < 1:
            raise ConfigError("num_instruments must be positive")
        if self.gamma is not None:
            g = np.asarray(self.gamma, dtype=float)
            if g.shape != (self.num_instruments,):
                raise ConfigError("gamma length must equal num_instruments")
            if np.any(g < 0) or np.any(g > 1):
                raise ConfigError("gamma entries must lie in [0, 1]")
        for name in ("sigma_u", "sigma0", "sigma1", "sigma_a", "sigma_y"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.kind == "civ" and self.covariate_dim < 2:
            if self.covariate_dim == 0:
                self.covariate_dim = 2
            else:
                raise ConfigError("civ needs covariate_dim >= 2")
        if self.kind != "civ" and self.covariate_dim not in (0, None):
            raise ConfigError("covariate_dim applies to civ only")
        if self.theta0 is not None:
            want = len(_DEFAULT_THETA[self.kind])
            if len(np.atleast_1d(self.theta0)) != want:
                raise ConfigError(f"theta0 for {self.kind} has {want} entries")
        if self.eval_size < 1:
            raise ConfigError("eval_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown DGP fields: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    z: int
    a: float
    y: float
    policy_id: int
    logged_propensity: float


@dataclass(frozen=True)
class Dataset:
    """Column store of logged samples, ordered by collection time."""

    x: np.ndarray
    z: np.ndarray
    a: np.ndarray
    y: np.ndarray
    policy_id: np.ndarray
    propensity: np.ndarray
    num_instruments: int

    def __post_init__(self):
        for arr in (self.x, self.z, self.a, self.y, self.policy_id, self.propensity):
            arr.setflags(write=False)

    @classmethod
    def empty(cls, num_instruments: int, d: int = 0) -> "Dataset":
        return cls(np.zeros((0, d)), np.zeros(0, dtype=np.intp), np.zeros(0), np.zeros(0),
                   np.zeros(0, dtype=np.intp), np.zeros(0), num_instruments)

    @classmethod
    def from_arrays(cls, z, a, y, x=None, num_instruments=None, policy_id=None, propensity=None):
        z = np.asarray(z, dtype=np.intp)
        n = len(z)
        x = np.zeros((n, 0)) if x is None else np.asarray(x, dtype=float).reshape(n, -1)
        m = int(z.max()) + 1 if num_instruments is None else int(num_instruments)
        pid = np.zeros(n, dtype=np.intp) if policy_id is None else np.asarray(policy_id, dtype=np.intp)
        prop = np.full(n, 1.0 / m) if propensity is None else np.asarray(propensity, dtype=float)
        return cls(x, z, np.asarray(a, dtype=float), np.asarray(y, dtype=float), pid, prop, m)

    def __len__(self):
        return len(self.z)

    def __getitem__(self, i) -> Sample:
        return Sample(self.x[i].copy(), int(self.z[i]), float(self.a[i]), float(self.y[i]),
                      int(self.policy_id[i]), float(self.propensity[i]))

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.x[idx], self.z[idx], self.a[idx], self.y[idx], self.policy_id[idx],
                       self.propensity[idx], self.num_instruments)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.concatenate([self.x, other.x]), np.concatenate([self.z, other.z]),
                       np.concatenate([self.a, other.a]), np.concatenate([self.y, other.y]),
                       np.concatenate([self.policy_id, other.policy_id]),
                       np.concatenate([self.propensity, other.propensity]), self.num_instruments)


@dataclass(frozen=True)
class EvalSet:
    """Frozen draws of (x, a) at which prediction errors are averaged."""

    x: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.x.setflags(write=False)
        self.a.setflags(write=False)

    def __len__(self):
        return len(self.a)


def linear_features(kind: str, x, a) -> np.ndarray:
    """Feature map psi(x, a) of the linear outcome family used for each kind.

    iv / binary_confounded: [a, 1 - a]; misspec: [a, 1]; civ: [x2, a].
    """
    a = np.asarray(a, dtype=float)
    if kind in ("iv", "binary_confounded"):
        return np.stack([a, 1.0 - a], axis=-1)
    if kind == "misspec":
        return np.stack([a, np.ones_like(a)], axis=-1)
    if kind == "civ":
        x = np.asarray(x, dtype=float).reshape(len(a), -1)
        return np.stack([x[:, 1], a], axis=-1)
    raise ConfigError(f"unknown kind {kind!r}")


@dataclass(frozen=True)
class DgpInstance:
    config: DgpConfig
    gamma: np.ndarray
    theta0: np.ndarray
    eval_set: EvalSet

    @property
    def kind(self):
        return self.config.kind

    @property
    def num_instruments(self):
        return self.config.num_instruments

    @property
    def covariate_dim(self):
        return self.config.covariate_dim if self.kind == "civ" else 0

    def sample_covariates(self, n, rng):
        if self.kind != "civ":
            return np.zeros((n, 0))
        d = self.covariate_dim
        x = rng.standard_normal((n, d))
        x[:, 0] = (rng.random(n) < 0.5).astype(float)
        return x

    def counterfactual(self, x, a):
        """f(x, a) = g(x, a; theta0) for batches."""
        a = np.asarray(a, dtype=float)
        t = self.theta0
        if self.kind in ("iv", "binary_confounded"):
            return a * t[0] + (1.0 - a) * t[1]
        if self.kind == "civ":
            x = np.asarray(x, dtype=float).reshape(len(a), -1)
            return x[:, 1] + a * t[0]
        return a * a * t[0]

    def generate(self, policy: Policy, n: int, rng: np.random.Generator, debug=False):
        """Draw ``n`` raw samples. Returns (x, z, a, y, propensity) and, with ``debug``, the latent draws."""
        cfg = self.config
        x = self.sample_covariates(n, rng)
        P = np.asarray(policy.probs(x if policy.input_dim else np.zeros((n, 0))))
        cdf = np.cumsum(P, axis=1)
        cdf[:, -1] = 1.0
        uz = rng.random(n)
        z = (uz[:, None] >= cdf).sum(axis=1)
        z = np.minimum(z, self.num_instruments - 1)
        u = cfg.sigma_u * rng.standard_normal(n)
        ua = rng.random(n)
        e1 = rng.standard_normal(n)
        e0 = rng.standard_normal(n)
        g = self.gamma[z]
        if self.kind == "civ":
            x1 = x[:, 0]
            g = x1 * g + (1.0 - x1) * (1.0 - g)
        if self.kind == "misspec":
            p = None
            a = g + u + cfg.sigma_a * e1
            y = a * a * self.theta0[0] + u + cfg.sigma_y * e0
        else:
            p = clip01(g + u)
            a = (ua < p).astype(float)
            xi = a * cfg.sigma1 * e1 + (1.0 - a) * cfg.sigma0 * e0
            y = self.counterfactual(x, a) + u + xi
        prop = P[np.arange(n), z]
        out = (x, z.astype(np.intp), a, y, prop)
        if debug:
            if p is not None and (np.any(p < 0) or np.any(p > 1)):
                raise AssertionError("compliance probability left [0, 1]")
            return out, {"u": u, "p": p}
        return out


def make_dgp(config: DgpConfig, seed: int = 0) -> DgpInstance:
    """Build a DGP instance; gamma (if unset) and the evaluation set are drawn from ``seed``."""
    if not isinstance(config, DgpConfig):
        raise ConfigError("config must be a DgpConfig")
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(7,)))
    m = config.num_instruments
    if config.gamma is not None:
        gamma = np.asarray(config.gamma, dtype=float)
    elif config.kind == "binary_confounded":
        gamma = np.array([0.0, 1.0])
    else:
        gamma = gamma_pattern(m, rng)
    theta0 = np.asarray(config.theta0 if config.theta0 is not None else _DEFAULT_THETA[config.kind], dtype=float)
    M = config.eval_size
    proto = DgpInstance(config, gamma, theta0, EvalSet(np.zeros((0, 0)), np.zeros(0)))
    ex = proto.sample_covariates(M, rng)
    if config.kind == "misspec":
        ea = rng.random(M)
    else:
        ea = (rng.random(M) < 0.5).astype(float)
    gamma.setflags(write=False)
    theta0.setflags(write=False)
    return DgpInstance(config, gamma, theta0, EvalSet(ex, ea))


def sample_batch(dgp: DgpInstance, policy: Policy, n: int, registry: PolicyRegistry, rng,
                 policy_id: Optional[int] = None) -> Dataset:
    """Collect ``n`` samples under ``policy`` (which must be in ``registry``)."""
    if n <= 0:
        raise ValueError("n must be positive")
    if policy_id is None:
        policy_id = next((i for i, (p, _) in enumerate(registry.entries) if p is policy), None)
        if policy_id is None:
            raise ValueError("policy is not registered")
    elif not 0 <= policy_id < len(registry):
        raise ValueError("policy is not registered")
    x, z, a, y, prop = dgp.generate(policy, n, rng)
    return Dataset(x, z, a, y, np.full(n, policy_id, dtype=np.intp), prop, dgp.num_instruments)


def true_counterfactual(dgp: DgpInstance, x, a):
    """Scalar (or batched) ground-truth counterfactual prediction f(x, a)."""
    scalar = np.ndim(a) == 0
    a_arr = np.atleast_1d(np.asarray(a, dtype=float))
    x_arr = np.zeros((len(a_arr), 0)) if x is None or np.size(x) == 0 else np.asarray(x, dtype=float).reshape(len(a_arr), -1)
    out = dgp.counterfactual(x_arr, a_arr)
    return float(out[0]) if scalar else out


def true_mse(dgp: DgpInstance, theta, eval_set: Optional[EvalSet] = None) -> float:
    """Mean squared prediction error against the truth over the evaluation set.

    ``theta`` is either a parameter vector of the kind's linear family or a
    callable ``f(x, a)`` returning batched predictions.
    """
    ev = dgp.eval_set if eval_set is None else eval_set
    if len(ev) == 0:
        raise ValueError("empty evaluation set")
    truth = dgp.counterfactual(ev.x, ev.a)
    if callable(theta):
        pred = np.asarray(theta(ev.x, ev.a), dtype=float)
    else:
        theta = np.asarray(theta, dtype=float)
        F = linear_features(dgp.kind, ev.x, ev.a)
        if theta.shape != (F.shape[1],):
            raise ValueError("theta shape does not match the outcome family")
        pred = F @ theta
    return float(np.mean((truth - pred) ** 2))


def uniform_policy(dgp: DgpInstance) -> SoftmaxPolicy:
    return SoftmaxPolicy(dgp.num_instruments)
