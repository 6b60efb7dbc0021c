"""Experiment runner: configuration, paired trials, diagnostics and CSV output.

Every experiment is a pure function of its JSON configuration. Results are
written as RFC-4180 CSV (floats at 17 significant digits, atomic temp file and
rename) next to a ``<name>.meta.json`` sidecar holding the config hash.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import rng as rngmod
from .engine import OptimizeOptions, fd_gradient, gradient_replicates, run_dia
from .estimators import EstimationError, spec_for
from .influence import InfluenceConfig
from .oracle import brute_force_policy
from .policy import PolicyRegistry, SoftmaxPolicy, register
from .sampling import AcceptanceError, ResampleConfig, is_mse_estimate, rs_mse_estimate
from .sim import ConfigError, DgpConfig, make_dgp, sample_batch

EXPERIMENTS = ("dia_vs_uniform", "gradient_variance", "sampler_variance", "policy_ordering", "oracle_table")

TRACE_COLUMNS = ("trial", "allocation", "samples", "mse_dia", "mse_uniform", "ratio", "accepted_N'", "k_used",
                 "grad_steps")


@dataclass(frozen=True)
class OptimizerSettings:
    steps: int = 200
    lr: float = 0.05
    grad_tol: float = 1e-4
    patience: int = 10
    influence_order: int = 2
    policy_form: str = "softmax_logits"

    def options(self, resample: ResampleConfig) -> OptimizeOptions:
        return OptimizeOptions(steps=self.steps, lr=self.lr, grad_tol=self.grad_tol, patience=self.patience,
                               resample=resample, influence=InfluenceConfig(order=self.influence_order),
                               policy_form=self.policy_form)


@dataclass(frozen=True)
class DiagnosticSettings:
    """Sizes and replicate counts for the non-DIA experiment kinds."""

    sizes: tuple = (200, 500, 1000, 2000)
    reps: int = 200
    fd_reps: int = 400
    fd_step: float = 0.05
    policy_logits: Optional[tuple] = None
    behavior: tuple = (0.5, 0.5)
    target: tuple = (0.4, 0.6)
    n: int = 1000
    ks: tuple = (10, 30, 100)
    ordering_policies: tuple = ((0.8, 0.2), (0.5, 0.5), (0.2, 0.8))
    alphas: tuple = (0.5, 0.65, 0.8)
    grid_step: float = 0.05
    mc_trials: int = 200
    n_per_trial: int = 2000


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "dia_vs_uniform"
    dgp: DgpConfig = field(default_factory=DgpConfig)
    K: int = 5
    batch_n: int = 1000
    trials: int = 30
    seed: int = 0
    dgp_seed: int = 0
    resample: ResampleConfig = field(default_factory=ResampleConfig)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    diagnostics: DiagnosticSettings = field(default_factory=DiagnosticSettings)
    output: str = "results"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.K < 1 or self.batch_n < 1:
            raise ConfigError("K and batch_n must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        try:
            if "dgp" in d:
                d["dgp"] = DgpConfig.from_dict(d["dgp"])
            if "resample" in d:
                d["resample"] = ResampleConfig(**d["resample"])
            if "optimizer" in d:
                d["optimizer"] = OptimizerSettings(**d["optimizer"])
            if "diagnostics" in d:
                d["diagnostics"] = DiagnosticSettings(**{k: _tupled(v) for k, v in d["diagnostics"].items()})
            return cls(**d)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as e:
                raise ConfigError(f"invalid JSON: {e}") from e

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _tupled(v):
    if isinstance(v, list):
        return tuple(_tupled(x) for x in v)
    return v


# --- output -------------------------------------------------------------------------------------

def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_results(rows, path, columns=None):
    """Write dict rows as CSV atomically. ``columns`` fixes the header for empty row sets."""
    rows = list(rows)
    if columns is None:
        if not rows:
            raise ValueError("columns are required for an empty row set")
        columns = list(rows[0])
    columns = list(columns)
    for r in rows:
        if list(r) != columns:
            raise ValueError("rows do not share a schema")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    _atomic_write(path, buf.getvalue())


def _atomic_write(path, text):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_results(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_sidecar(path, config: ExperimentConfig, extra=None):
    meta = {"config_sha256": config.digest(), "experiment": config.experiment, "rng": rngmod.ALGORITHM,
            "config": config.to_dict()}
    meta.update(extra or {})
    _atomic_write(os.fspath(path) + ".meta.json", json.dumps(meta, sort_keys=True, indent=2) + "\n")


# --- experiments --------------------------------------------------------------------------------

def paired_trials(config: ExperimentConfig):
    """Run DIA and the all-uniform arm on shared streams; returns trace rows."""
    dgp = make_dgp(config.dgp, config.dgp_seed)
    opts = config.optimizer.options(config.resample)
    rows = []
    for t in range(config.trials):
        a = run_dia(dgp, config.K, config.batch_n, opts, seed=config.seed, trial=t)
        u = run_dia(dgp, config.K, config.batch_n, opts, seed=config.seed, trial=t, adaptive=False)
        for ra, ru in zip(a.records, u.records):
            rows.append({"trial": t, "allocation": ra.allocation, "samples": ra.samples, "mse_dia": ra.mse,
                         "mse_uniform": ru.mse, "ratio": ra.mse / ru.mse if ru.mse > 0 else float("nan"),
                         "accepted_N'": ra.accepted, "k_used": ra.k_used, "grad_steps": ra.grad_steps})
    return rows


def summarize_trials(rows):
    """Per-allocation ratio summary: mean and stderr of per-trial ratios, ratio of means, paired difference."""
    out = []
    allocs = sorted({r["allocation"] for r in rows})
    for j in allocs:
        sel = [r for r in rows if r["allocation"] == j]
        a = np.array([r["mse_dia"] for r in sel])
        u = np.array([r["mse_uniform"] for r in sel])
        ratio = np.array([r["ratio"] for r in sel])
        d = a - u
        T = len(sel)
        se = lambda v: float(v.std(ddof=1) / math.sqrt(T)) if T > 1 else float("nan")
        out.append({"allocation": j, "trials": T, "mean_ratio": float(ratio.mean()), "stderr_ratio": se(ratio),
                    "median_ratio": float(np.median(ratio)), "ratio_of_means": float(a.mean() / u.mean()),
                    "mean_mse_dia": float(a.mean()), "mean_mse_uniform": float(u.mean()),
                    "paired_diff": float(d.mean()), "paired_diff_stderr": se(d)})
    return out


def gradient_variance(config: ExperimentConfig):
    """Mean and variance of the naive, CV and IF gradients per sample size, plus a finite-difference reference."""
    dgp = make_dgp(config.dgp, config.dgp_seed)
    ds = config.diagnostics
    m = dgp.num_instruments
    pol = SoftmaxPolicy(m, ds.policy_logits)
    rows = []
    for i, n in enumerate(ds.sizes):
        reps = gradient_replicates(dgp, pol, n, ds.reps, seed=rngmod.stream(config.seed, i).integers(2 ** 31),
                                   order=config.optimizer.influence_order)
        fd_mean, fd_se = fd_gradient(dgp, pol, n, ds.fd_reps, h=ds.fd_step,
                                     seed=rngmod.stream(config.seed, i, 1).integers(2 ** 31))
        for j in range(m):
            for tag, g in reps.items():
                rows.append({"n": n, "estimator": tag, "component": j, "reps": len(g), "mean": float(g[:, j].mean()),
                             "variance": float(g[:, j].var(ddof=1)),
                             "stderr": float(g[:, j].std(ddof=1) / math.sqrt(len(g)))})
            rows.append({"n": n, "estimator": "finite_difference", "component": j, "reps": ds.fd_reps,
                         "mean": float(fd_mean[j]), "variance": float("nan"), "stderr": float(fd_se[j])})
    return rows


def _logged_batch(dgp, behavior, n, rng):
    pol = SoftmaxPolicy.from_probs(behavior)
    reg = register(PolicyRegistry(), pol, n)
    return sample_batch(dgp, pol, n, reg, rng, policy_id=0), reg


def sampler_variance(config: ExperimentConfig):
    """Variance across logged datasets of the RS and IS subset estimates of a target policy's MSE."""
    dgp = make_dgp(config.dgp, config.dgp_seed)
    ds = config.diagnostics
    spec = spec_for(dgp.kind)
    target = SoftmaxPolicy.from_probs(ds.target)
    rows = []
    for k in ds.ks:
        rs, is_ = [], []
        for r in range(ds.reps):
            data, reg = _logged_batch(dgp, ds.behavior, ds.n, rngmod.stream(config.seed, k, r, 0))
            ref = spec.fit(data)
            cfg = replace(config.resample, seed=0)
            try:
                rs.append(rs_mse_estimate(data, target, reg, spec, ref, dgp.eval_set, cfg,
                                          rng=rngmod.stream(config.seed, k, r, 1), k=k))
                is_.append(is_mse_estimate(data, target, spec, ref, dgp.eval_set, cfg,
                                           rng=rngmod.stream(config.seed, k, r, 2), k=k))
            except (AcceptanceError, EstimationError, OverflowError):
                continue
        rs, is_ = np.asarray(rs), np.asarray(is_)
        rows.append({"k": k, "reps": len(rs), "rs_mean": float(rs.mean()), "rs_variance": float(rs.var(ddof=1)),
                     "is_mean": float(is_.mean()), "is_variance": float(is_.var(ddof=1))})
    return rows


def policy_ordering(config: ExperimentConfig):
    """RS estimates for fixed policies across alpha; one row per (trial, alpha, policy)."""
    dgp = make_dgp(config.dgp, config.dgp_seed)
    ds = config.diagnostics
    spec = spec_for(dgp.kind)
    pols = [SoftmaxPolicy.from_probs(p) for p in ds.ordering_policies]
    rows = []
    for t in range(config.trials):
        data, reg = _logged_batch(dgp, ds.behavior, ds.n, rngmod.stream(config.seed, t, 0))
        ref = spec.fit(data)
        for ai, alpha in enumerate(ds.alphas):
            cfg = replace(config.resample, alpha=alpha)
            vals = []
            for pi, pol in enumerate(pols):
                vals.append(rs_mse_estimate(data, pol, reg, spec, ref, dgp.eval_set, cfg,
                                            rng=rngmod.stream(config.seed, t, 1, ai, pi)))
            ranks = np.argsort(np.argsort(vals))
            for pi, v in enumerate(vals):
                rows.append({"trial": t, "alpha": alpha, "policy": pi, "estimate": v, "rank": int(ranks[pi])})
    return rows


def ordering_agreement(rows) -> float:
    """Fraction of trials whose policy ranking is identical for every alpha."""
    trials = sorted({r["trial"] for r in rows})
    same = 0
    for t in trials:
        by_alpha = {}
        for r in rows:
            if r["trial"] == t:
                by_alpha.setdefault(r["alpha"], {})[r["policy"]] = r["rank"]
        ranks = {tuple(v[p] for p in sorted(v)) for v in by_alpha.values()}
        same += len(ranks) == 1
    return same / len(trials)


def oracle_table(config: ExperimentConfig):
    dgp = make_dgp(config.dgp, config.dgp_seed)
    ds = config.diagnostics
    _, table = brute_force_policy(dgp, ds.grid_step, ds.mc_trials, ds.n_per_trial, seed=config.seed)
    rows = []
    for p, mean, se in table:
        row = {f"p{j}": float(v) for j, v in enumerate(p)}
        row.update(mean_mse=mean, stderr=se)
        rows.append(row)
    return rows


_DIAGNOSTICS = {"gradient_variance": gradient_variance, "sampler_variance": sampler_variance,
                "policy_ordering": policy_ordering, "oracle_table": oracle_table}


def run_diagnostics(config: ExperimentConfig, out_dir=None):
    """Run a diagnostic experiment kind and write ``<experiment>.csv``; returns the rows."""
    if config.experiment not in _DIAGNOSTICS:
        raise ConfigError(f"{config.experiment} is not a diagnostic experiment")
    rows = _DIAGNOSTICS[config.experiment](config)
    out_dir = config.output if out_dir is None else out_dir
    path = os.path.join(out_dir, f"{config.experiment}.csv")
    write_results(rows, path)
    extra = {}
    if config.experiment == "policy_ordering":
        extra["ordering_agreement"] = ordering_agreement(rows)
    write_sidecar(path, config, extra)
    return rows


def run_experiment(config: ExperimentConfig, out_dir=None):
    """Run the configured experiment; returns the list of written CSV paths."""
    out_dir = config.output if out_dir is None else out_dir
    if config.experiment != "dia_vs_uniform":
        run_diagnostics(config, out_dir)
        return [os.path.join(out_dir, f"{config.experiment}.csv")]
    rows = paired_trials(config)
    trace = os.path.join(out_dir, "trace.csv")
    summary = os.path.join(out_dir, "summary.csv")
    write_results(rows, trace, TRACE_COLUMNS)
    write_sidecar(trace, config)
    write_results(summarize_trials(rows), summary)
    write_sidecar(summary, config)
    return [trace, summary]
