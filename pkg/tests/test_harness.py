import hashlib
import json
import os
import threading

import numpy as np
import pytest

from dia.cli import main
from dia.harness import (DiagnosticSettings, ExperimentConfig, OptimizerSettings, TRACE_COLUMNS, ordering_agreement,
                         read_results, run_experiment, summarize_trials, write_results)
from dia.sampling import ResampleConfig
from dia.sim import ConfigError, DgpConfig

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def _small(**kw):
    base = dict(dgp=DgpConfig(kind="iv", num_instruments=3), K=2, batch_n=200, trials=2,
                resample=ResampleConfig(B=4), optimizer=OptimizerSettings(steps=5))
    base.update(kw)
    return ExperimentConfig(**base)


def test_single_allocation_ratio_is_one(tmp_path):
    cfg = _small(K=1, trials=1)
    trace, summary = run_experiment(cfg, tmp_path)
    rows = read_results(trace)
    assert len(rows) == 1 and float(rows[0]["ratio"]) == 1.0
    assert list(rows[0]) == list(TRACE_COLUMNS)
    assert float(read_results(summary)[0]["ratio_of_means"]) == 1.0


def test_reruns_are_byte_identical(tmp_path):
    cfg = _small()
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    for pa, pb in zip(a, b):
        assert open(pa, "rb").read() == open(pb, "rb").read()
        assert open(pa + ".meta.json", "rb").read() == open(pb + ".meta.json", "rb").read()


def test_first_batch_shared_across_arms(tmp_path):
    trace, _ = run_experiment(_small(), tmp_path)
    for r in read_results(trace):
        if r["allocation"] == "0":
            assert r["mse_dia"] == r["mse_uniform"]


def test_sidecar_carries_config_hash(tmp_path):
    cfg = _small()
    trace, _ = run_experiment(cfg, tmp_path)
    meta = json.load(open(trace + ".meta.json"))
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    assert meta["config_sha256"] == hashlib.sha256(blob).hexdigest() == cfg.digest()
    assert ExperimentConfig.from_dict(meta["config"]) == cfg


def test_empty_rows_write_header(tmp_path):
    p = tmp_path / "e.csv"
    write_results([], p, ["a", "b"])
    assert open(p, "rb").read() == b"a,b\r\n"
    with pytest.raises(ValueError):
        write_results([], p)


def test_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    rows = [{"x": float(v), "n": i, "s": 'quote "me", ok', "flag": bool(i % 2)} for i, v in enumerate(rng.normal(size=20))]
    rows.append({"x": float("nan"), "n": 99, "s": "", "flag": True})
    p = tmp_path / "r.csv"
    write_results(rows, p)
    back = read_results(p)
    for r, b in zip(rows[:-1], back):
        assert float(b["x"]) == r["x"] and int(b["n"]) == r["n"] and b["s"] == r["s"]
    assert np.isnan(float(back[-1]["x"]))
    with pytest.raises(ValueError):
        write_results([{"a": 1}, {"b": 2}], p)


def test_concurrent_writers_distinct_paths(tmp_path):
    def work(i):
        write_results([{"w": i, "v": j} for j in range(500)], tmp_path / f"{i}.csv")

    threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(8):
        rows = read_results(tmp_path / f"{i}.csv")
        assert len(rows) == 500 and all(r["w"] == str(i) for r in rows)
    assert not [f for f in os.listdir(tmp_path) if f.endswith(".part")]


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(experiment="nope")
    with pytest.raises(ConfigError):
        ExperimentConfig(trials=0)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"resample": {"alpha": 2.0}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"dgp": {"kind": "iv", "num_instruments": 0}})


def test_shipped_configs_load():
    names = sorted(f for f in os.listdir(CONFIGS) if f.endswith(".json"))
    assert len(names) == 5
    for f in names:
        cfg = ExperimentConfig.load(os.path.join(CONFIGS, f))
        assert cfg.experiment == f[:-5]


def test_summary_statistics():
    rows = [{"allocation": 0, "mse_dia": 2.0, "mse_uniform": 4.0, "ratio": 0.5},
            {"allocation": 0, "mse_dia": 3.0, "mse_uniform": 3.0, "ratio": 1.0}]
    s = summarize_trials(rows)[0]
    assert s["mean_ratio"] == 0.75 and s["ratio_of_means"] == pytest.approx(5 / 7)
    assert s["paired_diff"] == -1.0 and s["paired_diff_stderr"] == pytest.approx(1.0)


def test_ordering_agreement():
    rows = []
    for t, flip in ((0, False), (1, True)):
        for alpha in (0.5, 0.8):
            ranks = [1, 0] if flip and alpha == 0.8 else [0, 1]
            rows += [{"trial": t, "alpha": alpha, "policy": p, "rank": ranks[p]} for p in (0, 1)]
    assert ordering_agreement(rows) == 0.5


def test_diagnostic_kinds_run(tmp_path):
    ds = DiagnosticSettings(sizes=(100, 200), reps=20, fd_reps=20, ks=(10, 30), n=300, grid_step=0.25,
                            mc_trials=5, n_per_trial=200)
    dgp = DgpConfig(kind="binary_confounded", num_instruments=2, sigma_u=0.0, sigma0=1.0, sigma1=2 ** 0.5)
    for exp in ("gradient_variance", "sampler_variance", "policy_ordering", "oracle_table"):
        cfg = ExperimentConfig(experiment=exp, dgp=dgp, trials=3, diagnostics=ds, resample=ResampleConfig(B=8))
        (path,) = run_experiment(cfg, tmp_path)
        rows = read_results(path)
        assert rows and os.path.exists(path + ".meta.json")
    meta = json.load(open(tmp_path / "policy_ordering.csv.meta.json"))
    assert 0.0 <= meta["ordering_agreement"] <= 1.0
    grads = read_results(tmp_path / "gradient_variance.csv")
    assert {r["estimator"] for r in grads} == {"naive", "cv", "if", "finite_difference"}


# --- command line -------------------------------------------------------------------------------

def _write_cfg(tmp_path, cfg):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_dict()))
    return str(p)


def test_cli_run_success(tmp_path, capsys):
    p = _write_cfg(tmp_path, _small())
    assert main(["run", "--config", p, "--out", str(tmp_path / "o"), "--trials", "1", "--seed", "3"]) == 0
    out = capsys.readouterr().out.split()
    assert len(out) == 2 and all(os.path.exists(x) for x in out)
    assert len(read_results(out[0])) == 2
    assert json.load(open(out[0] + ".meta.json"))["config"]["seed"] == 3


def test_cli_oracle(tmp_path):
    cfg = _small(dgp=DgpConfig(kind="iv", num_instruments=2),
                 diagnostics=DiagnosticSettings(mc_trials=5, n_per_trial=100))
    p = _write_cfg(tmp_path, cfg)
    assert main(["oracle", "--config", p, "--out", str(tmp_path), "--grid-step", "0.25"]) == 0
    assert len(read_results(tmp_path / "oracle_table.csv")) == 5


def test_cli_config_errors(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text(json.dumps({"experiment": "dia_vs_uniform", "extra": 1}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    p = _write_cfg(tmp_path, _small())
    assert main(["run", "--config", p, "--out", str(tmp_path), "--trials", "0"]) == 2


def test_cli_runtime_failure(tmp_path):
    p = _write_cfg(tmp_path, _small(K=1, trials=1))
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["run", "--config", p, "--out", str(blocker)]) == 3
