import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from dia import rng as rngmod
from dia.policy import PolicyRegistry, SoftmaxPolicy, eval_probs, register
from dia.sim import (ConfigError, DgpConfig, EvalSet, Sample, clip01, gamma_pattern, make_dgp, sample_batch,
                     true_counterfactual, true_mse)

from conftest import collect


def test_gamma_pattern_has_extremes_and_interior():
    g = gamma_pattern(10, np.random.default_rng(0))
    assert np.sum(g == 0.95) == 1 and np.sum(g == 0.05) == 1
    assert sorted(g) == pytest.approx(np.linspace(0.05, 0.95, 10))
    g40 = gamma_pattern(40, np.random.default_rng(1))
    assert np.sum(np.isclose(g40, 0.95)) == 2 and np.sum(np.isclose(g40, 0.05)) == 2


def test_config_validation():
    with pytest.raises(ConfigError):
        DgpConfig(kind="nope")
    with pytest.raises(ConfigError):
        DgpConfig(kind="iv", num_instruments=3, gamma=[0.1, 0.2])
    with pytest.raises(ConfigError):
        DgpConfig(kind="iv", num_instruments=2, gamma=[0.1, 1.2])
    with pytest.raises(ConfigError):
        DgpConfig(kind="iv", sigma_u=-1)
    with pytest.raises(ConfigError):
        DgpConfig.from_dict({"kind": "iv", "bogus": 1})
    assert DgpConfig(kind="civ").covariate_dim == 2
    cfg = DgpConfig(kind="misspec", num_instruments=3)
    assert DgpConfig.from_dict(cfg.to_dict()) == cfg


def test_extreme_compliance_instrument():
    dgp = make_dgp(DgpConfig(kind="iv", num_instruments=2, gamma=[0.0, 1.0], sigma_u=0.0), 0)
    data, _ = collect(dgp, SoftmaxPolicy(2), 2000)
    assert np.all(data.a[data.z == 1] == 1) and np.all(data.a[data.z == 0] == 0)


def test_binary_confounded_without_confounding_has_a_equal_z(binary_dgp):
    data, _ = collect(binary_dgp, SoftmaxPolicy(2), 1000)
    assert np.array_equal(data.a, data.z.astype(float))
    pol = SoftmaxPolicy.from_probs([0.0, 1.0])
    data, _ = collect(binary_dgp, pol, 100)
    assert np.all(data.z == 1) and np.all(data.a == 1)


def test_saturated_noise_free_iv():
    dgp = make_dgp(DgpConfig(kind="iv", num_instruments=2, gamma=[1.0, 1.0], sigma_u=0, sigma0=0, sigma1=0), 0)
    data, _ = collect(dgp, SoftmaxPolicy(2), 500)
    assert np.all(data.a == 1) and np.allclose(data.y, dgp.theta0[0])


def test_civ_compliance_flip():
    from scipy.integrate import quad

    dgp = make_dgp(DgpConfig(kind="civ", num_instruments=4), 0)
    data, _ = collect(dgp, SoftmaxPolicy(4), 100_000)
    assert set(np.unique(data.x[:, 0])) == {0.0, 1.0}
    su = dgp.config.sigma_u
    for x1 in (0.0, 1.0):
        for j in range(4):
            sel = (data.x[:, 0] == x1) & (data.z == j)
            c = dgp.gamma[j] if x1 == 1 else 1 - dgp.gamma[j]
            want = quad(lambda u: np.clip(c + u, 0, 1) * stats.norm.pdf(u, 0, su), -8 * su, 8 * su)[0]
            a = data.a[sel]
            assert abs(a.mean() - want) < 3 * a.std() / np.sqrt(len(a)) + 1e-3


def test_counterfactual_examples():
    dgp = make_dgp(DgpConfig(kind="iv", theta0=[2.0, 1.0]), 0)
    assert true_counterfactual(dgp, None, 1) == 2.0 and true_counterfactual(dgp, None, 0) == 1.0
    civ = make_dgp(DgpConfig(kind="civ", theta0=[1.0]), 0)
    assert true_counterfactual(civ, [1.0, 0.5], 1.0) == pytest.approx(1.5)
    mis = make_dgp(DgpConfig(kind="misspec", theta0=[0.5]), 0)
    assert true_counterfactual(mis, None, 2.0) == pytest.approx(2.0)


def test_true_mse_examples():
    dgp = make_dgp(DgpConfig(kind="iv", theta0=[2.0, 1.0]), 0)
    assert true_mse(dgp, [2.0, 1.0]) == 0.0
    ev = EvalSet(np.zeros((2, 0)), np.array([0.0, 1.0]))
    assert true_mse(dgp, [1.0, 1.0], ev) == pytest.approx(0.5)
    theta = np.array([0.3, -0.7])
    ref = sum((true_counterfactual(dgp, None, a) - (theta[0] * a + theta[1] * (1 - a))) ** 2
              for a in dgp.eval_set.a) / len(dgp.eval_set)
    assert true_mse(dgp, theta) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ValueError):
        true_mse(dgp, [1.0, 2.0, 3.0])


def test_true_mse_invariant_to_eval_order():
    dgp = make_dgp(DgpConfig(kind="civ"), 0)
    perm = np.random.default_rng(1).permutation(len(dgp.eval_set))
    ev = EvalSet(dgp.eval_set.x[perm], dgp.eval_set.a[perm])
    assert true_mse(dgp, [0.4, 1.3], ev) == pytest.approx(true_mse(dgp, [0.4, 1.3]), rel=1e-12)


def test_sample_batch_errors(iv10):
    pol = SoftmaxPolicy(10)
    reg = register(PolicyRegistry(), pol, 5)
    with pytest.raises(ValueError):
        sample_batch(iv10, pol, 0, reg, rngmod.stream(0))
    with pytest.raises(ValueError):
        sample_batch(iv10, SoftmaxPolicy(10), 5, reg, rngmod.stream(0))


def test_heteroskedastic_outcomes(iv10):
    data, _ = collect(iv10, SoftmaxPolicy(10), 10_000)
    assert data.y[data.a == 1].var() > data.y[data.a == 0].var()


def test_clip_bounds_in_debug_mode(iv10):
    pol = SoftmaxPolicy(10)
    _, latent = iv10.generate(pol, 5000, rngmod.stream(3), debug=True)
    assert latent["p"].min() >= 0 and latent["p"].max() <= 1
    assert "u" not in {f.name for f in dataclasses.fields(Sample)}


@given(st.integers(0, 2 ** 20), st.sampled_from(["iv", "civ", "misspec", "binary_confounded"]))
def test_determinism_and_propensity_consistency(seed, kind):
    m = 2 if kind == "binary_confounded" else 3
    dgp = make_dgp(DgpConfig(kind=kind, num_instruments=m), seed % 7)
    pol = SoftmaxPolicy(m, np.random.default_rng(seed).normal(size=m))
    d1, reg = collect(dgp, pol, 50, seed)
    d2, _ = collect(dgp, pol, 50, seed)
    for f in ("x", "z", "a", "y", "propensity"):
        assert np.array_equal(getattr(d1, f), getattr(d2, f))
    probs = eval_probs(reg[0])
    assert np.allclose(d1.propensity, probs[d1.z], atol=1e-12)


@given(st.floats(-5, 5, allow_nan=False))
def test_clip01_range(v):
    c = clip01(v)
    assert 0.0 <= c <= 1.0 and (c == v or v < 0 or v > 1)
