"""Instrument-sampling policies, the policy registry and the effective mixture policy.

All policies work on batches: ``x`` has shape (n, d) (d may be 0 for
unconditional policies) and probabilities come back as (n, |Z|). The module
level functions accept either a single covariate vector or a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from ._mlp import MLPShape, backward, forward


class SupportError(ValueError):
    """A probability that must be positive is zero."""


def _as_batch(x, d):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1) if x.size else np.zeros((1, 0))
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"covariate dimension {x.shape[-1]} does not match policy input {d}")
    return x


class Policy:
    """Base class. Subclasses implement ``probs`` and ``prob_grad``."""

    form: str
    num_instruments: int
    input_dim: int = 0

    @property
    def weights(self) -> np.ndarray:
        raise NotImplementedError

    def with_weights(self, w) -> "Policy":
        raise NotImplementedError

    def probs(self, X) -> np.ndarray:
        raise NotImplementedError

    def score(self, X, z) -> np.ndarray:
        """Per-sample gradient of log pi_w(z|x), shape (n, len(weights))."""
        p = self.probs(X)[np.arange(len(z)), z]
        if np.any(p <= 0):
            raise SupportError("log-probability gradient requested at a zero-probability instrument")
        return self.prob_grad(X, z) / p[:, None]

    def prob_grad(self, X, z) -> np.ndarray:
        """Per-sample gradient of pi_w(z|x), shape (n, len(weights))."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


class SoftmaxPolicy(Policy):
    """Unconditional softmax over free logits (zero logits = uniform)."""

    form = "softmax_logits"

    def __init__(self, num_instruments: int, weights=None):
        self.num_instruments = int(num_instruments)
        self.input_dim = 0
        w = np.zeros(self.num_instruments) if weights is None else np.array(weights, dtype=float)
        if w.shape != (self.num_instruments,):
            raise ValueError("softmax logits must have one entry per instrument")
        w.setflags(write=False)
        self._w = w

    @classmethod
    def from_probs(cls, p):
        p = np.asarray(p, dtype=float)
        with np.errstate(divide="ignore"):
            return cls(len(p), np.log(p))

    @property
    def weights(self):
        return self._w

    def with_weights(self, w):
        return SoftmaxPolicy(self.num_instruments, w)

    def dist(self) -> np.ndarray:
        return softmax(self._w)

    def probs(self, X=None):
        n = _rows(X)
        return np.broadcast_to(self.dist(), (n, self.num_instruments))

    def score(self, X, z):
        z = np.asarray(z)
        p = self.dist()
        if np.any(p[z] <= 0):
            raise SupportError("log-probability gradient requested at a zero-probability instrument")
        g = -np.broadcast_to(p, (len(z), self.num_instruments)).copy()
        g[np.arange(len(z)), z] += 1.0
        return g

    def prob_grad(self, X, z):
        z = np.asarray(z)
        p = self.dist()
        g = -p[z][:, None] * p[None, :]
        g[np.arange(len(z)), z] += p[z]
        return g

    def to_dict(self):
        return {"form": self.form, "num_instruments": self.num_instruments, "weights": self._w.tolist()}


class MLPPolicy(Policy):
    """Conditional policy: d -> hidden sigmoid units -> |Z| logits -> softmax."""

    form = "conditional_mlp"

    def __init__(self, input_dim: int, num_instruments: int, hidden: int = 8, weights=None, rng=None):
        self.input_dim = int(input_dim)
        self.num_instruments = int(num_instruments)
        self.shape = MLPShape(self.input_dim, int(hidden), self.num_instruments)
        if weights is None:
            rng = np.random.default_rng(0) if rng is None else rng
            weights = self.shape.init(rng)
        w = np.array(weights, dtype=float)
        if w.shape != (self.shape.size,):
            raise ValueError("weight vector has the wrong length for the layer sizes")
        w.setflags(write=False)
        self._w = w

    @property
    def weights(self):
        return self._w

    def with_weights(self, w):
        return MLPPolicy(self.input_dim, self.num_instruments, self.shape.hidden, w)

    def probs(self, X):
        X = _as_batch(X, self.input_dim)
        logits, _ = forward(self.shape, self._w, X)
        return softmax(logits, axis=1)

    def score(self, X, z):
        X = _as_batch(X, self.input_dim)
        z = np.asarray(z)
        logits, H = forward(self.shape, self._w, X)
        p = softmax(logits, axis=1)
        if np.any(p[np.arange(len(z)), z] <= 0):
            raise SupportError("log-probability gradient requested at a zero-probability instrument")
        g_out = -p
        g_out[np.arange(len(z)), z] += 1.0
        return backward(self.shape, self._w, X, H, g_out, per_sample=True)

    def prob_grad(self, X, z):
        z = np.asarray(z)
        p = self.probs(X)[np.arange(len(z)), z]
        return self.score(X, z) * p[:, None]

    def to_dict(self):
        return {"form": self.form, "num_instruments": self.num_instruments, "input_dim": self.input_dim,
                "hidden": self.shape.hidden, "weights": self._w.tolist()}


class MixturePolicy(Policy):
    """Convex combination of component policies.

    At most one component is learnable; ``weights`` and gradients refer to it
    only, so the other components behave as constants.
    """

    form = "mixture"

    def __init__(self, components, mixture_weights, learnable=None):
        self.components = tuple(components)
        c = np.asarray(mixture_weights, dtype=float)
        if len(c) != len(self.components) or np.any(c < 0) or abs(c.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        self.coef = c
        self.learnable = learnable
        self.num_instruments = self.components[0].num_instruments
        self.input_dim = max(comp.input_dim for comp in self.components)

    @property
    def learnable_policy(self):
        return None if self.learnable is None else self.components[self.learnable]

    @property
    def weights(self):
        if self.learnable is None:
            return np.zeros(0)
        return self.components[self.learnable].weights

    def with_weights(self, w):
        if self.learnable is None:
            raise ValueError("mixture has no learnable component")
        comps = list(self.components)
        comps[self.learnable] = comps[self.learnable].with_weights(w)
        return MixturePolicy(comps, self.coef, self.learnable)

    def probs(self, X):
        X = _as_batch(X, self.input_dim) if self.input_dim else np.zeros((_rows(X), 0))
        out = np.zeros((X.shape[0], self.num_instruments))
        for c, comp in zip(self.coef, self.components):
            if c > 0:
                out += c * _component_probs(comp, X)
        return out

    def prob_grad(self, X, z):
        z = np.asarray(z)
        if self.learnable is None:
            return np.zeros((len(z), 0))
        comp = self.components[self.learnable]
        Xc = _slice_input(comp, X)
        return self.coef[self.learnable] * comp.prob_grad(Xc, z)

    def score(self, X, z):
        z = np.asarray(z)
        p = self.probs(X)[np.arange(len(z)), z]
        if np.any(p <= 0):
            raise SupportError("log-probability gradient requested at a zero-probability instrument")
        if self.learnable is None or self.coef[self.learnable] == 0:
            return np.zeros((len(z), len(self.weights)))
        return self.prob_grad(X, z) / p[:, None]

    def to_dict(self):
        return {"form": self.form, "mixture_weights": self.coef.tolist(), "learnable": self.learnable,
                "components": [c.to_dict() for c in self.components]}


def _rows(X):
    if X is None:
        return 1
    X = np.asarray(X)
    if X.ndim == 2:
        return X.shape[0]
    return 1


def _slice_input(comp, X):
    if comp.input_dim == 0:
        return np.zeros((_rows(X), 0))
    return X


def _component_probs(comp, X):
    return np.asarray(comp.probs(_slice_input(comp, X)))


def policy_from_dict(d: dict) -> Policy:
    form = d["form"]
    if form == "softmax_logits":
        return SoftmaxPolicy(d["num_instruments"], d["weights"])
    if form == "conditional_mlp":
        return MLPPolicy(d["input_dim"], d["num_instruments"], d.get("hidden", 8), d["weights"])
    if form == "mixture":
        return MixturePolicy([policy_from_dict(c) for c in d["components"]], d["mixture_weights"], d["learnable"])
    raise ValueError(f"unknown policy form {form!r}")


@dataclass(frozen=True)
class PolicyRegistry:
    """Ordered snapshots of deployed policies with the number of samples each collected."""

    entries: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> Policy:
        return self.entries[i][0]

    @property
    def total(self) -> int:
        return int(sum(c for _, c in self.entries))

    def average_probs(self, X) -> np.ndarray:
        """Sample-count weighted mean of every snapshot's probabilities, (n, |Z|)."""
        if not self.entries:
            raise ValueError("registry is empty")
        tot = self.total
        out = None
        for pol, cnt in self.entries:
            p = (cnt / tot) * _component_probs(pol, X if pol.input_dim else np.zeros((_rows(X), 0)))
            out = p if out is None else out + p
        return out

    def as_policy(self) -> MixturePolicy:
        tot = self.total
        return MixturePolicy([p for p, _ in self.entries], [c / tot for _, c in self.entries])


def register(registry: PolicyRegistry, policy: Policy, count: int) -> PolicyRegistry:
    """Return a new registry with ``policy`` appended; its id is the old length."""
    if count <= 0:
        raise ValueError("count must be positive")
    return PolicyRegistry(registry.entries + ((policy, int(count)),))


def eval_probs(policy: Policy, x=None) -> np.ndarray:
    """Probability vector over instruments at a single covariate ``x`` (or rows of a batch)."""
    if x is None or np.asarray(x).size == 0 and np.asarray(x).ndim <= 1:
        if policy.input_dim:
            raise ValueError("policy needs covariates")
        return np.asarray(policy.probs(np.zeros((1, 0))))[0]
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return np.asarray(policy.probs(_as_batch(x, policy.input_dim)))[0]
    return np.asarray(policy.probs(_as_batch(x, policy.input_dim)))


def log_prob_grad(policy: Policy, x, z) -> np.ndarray:
    """Gradient of log pi(z|x) with respect to the policy weights."""
    X = np.zeros((1, 0)) if policy.input_dim == 0 else _as_batch(x, policy.input_dim)
    return policy.score(X, np.array([int(z)]))[0]


def effective_policy(registry: PolicyRegistry, policy: Policy, n: int, N: int) -> MixturePolicy:
    """Mix the past-average policy (weight n/N) with the learnable one (weight 1 - n/N)."""
    if n > N or n < 0 or N <= 0:
        raise ValueError("need 0 <= n <= N")
    if n == 0:
        return MixturePolicy([policy], [1.0], learnable=0)
    if registry.total != n:
        raise ValueError("registry counts must sum to n")
    return MixturePolicy([registry.as_policy(), policy], [n / N, 1.0 - n / N], learnable=1)


def average_propensity(registry: PolicyRegistry, x, z) -> float:
    X = np.zeros((1, 0)) if x is None or np.asarray(x).size == 0 else _as_batch(x, np.asarray(x).shape[-1])
    return float(registry.average_probs(X)[0, int(z)])
