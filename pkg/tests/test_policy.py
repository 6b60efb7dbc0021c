import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dia.policy import (MixturePolicy, MLPPolicy, PolicyRegistry, SoftmaxPolicy, SupportError, average_propensity,
                        effective_policy, eval_probs, log_prob_grad, policy_from_dict, register)

logits = arrays(np.float64, st.integers(1, 6), elements=st.floats(-8, 8))


def test_softmax_examples():
    assert eval_probs(SoftmaxPolicy(4)) == pytest.approx([0.25] * 4)
    assert eval_probs(SoftmaxPolicy(2, [np.log(3), 0.0])) == pytest.approx([0.75, 0.25])


def test_mixture_probs():
    mix = MixturePolicy([SoftmaxPolicy(2), SoftmaxPolicy.from_probs([0.9, 0.1])], [0.5, 0.5])
    assert eval_probs(mix) == pytest.approx([0.7, 0.3])
    with pytest.raises(ValueError):
        MixturePolicy([SoftmaxPolicy(2)], [0.7])


def test_single_instrument_score_is_zero():
    assert np.all(log_prob_grad(SoftmaxPolicy(1), None, 0) == 0)


def test_zero_probability_score_raises():
    with pytest.raises(SupportError):
        log_prob_grad(SoftmaxPolicy.from_probs([1.0, 0.0]), None, 1)


def _fd_log_prob(policy, x, z, h=1e-5):
    w = policy.weights.copy()
    g = np.zeros_like(w)
    for j in range(len(w)):
        e = np.zeros_like(w)
        e[j] = h
        lp = np.log(eval_probs(policy.with_weights(w + e), x)[z])
        lm = np.log(eval_probs(policy.with_weights(w - e), x)[z])
        g[j] = (lp - lm) / (2 * h)
    return g


def test_softmax_score_formula_and_fd():
    pol = SoftmaxPolicy(4, [0.3, -1.0, 0.5, 2.0])
    p = eval_probs(pol)
    for z in range(4):
        want = np.eye(4)[z] - p
        assert np.allclose(log_prob_grad(pol, None, z), want, atol=1e-12)
        assert np.max(np.abs(_fd_log_prob(pol, None, z) - want)) < 1e-6


def test_mixture_score_scaling():
    past = SoftmaxPolicy(3)
    learn = SoftmaxPolicy(3, [0.4, -0.2, 1.0])
    reg = register(PolicyRegistry(), past, 1000)
    eff = effective_policy(reg, learn, 1000, 5000)
    for z in range(3):
        g = log_prob_grad(eff, None, z)
        want = 0.8 * learn.prob_grad(None, np.array([z]))[0] / eval_probs(eff)[z]
        assert np.allclose(g, want)
        assert np.max(np.abs(_fd_log_prob(eff, None, z) - g)) < 1e-6


def test_effective_policy_examples():
    learn = SoftmaxPolicy.from_probs([0.9, 0.1])
    reg = register(PolicyRegistry(), SoftmaxPolicy(2), 1000)
    assert eval_probs(effective_policy(reg, learn, 1000, 5000)) == pytest.approx([0.82, 0.18])
    assert eval_probs(effective_policy(PolicyRegistry(), learn, 0, 5000)) == pytest.approx([0.9, 0.1])
    fixed = effective_policy(reg, SoftmaxPolicy(2), 1000, 3000)
    assert eval_probs(fixed) == pytest.approx([0.5, 0.5])
    with pytest.raises(ValueError):
        effective_policy(reg, learn, 6000, 5000)
    full = effective_policy(reg, learn, 1000, 1000)
    assert np.all(log_prob_grad(full, None, 0) == 0)


def test_average_propensity_and_register():
    uni = SoftmaxPolicy(2)
    det = SoftmaxPolicy.from_probs([1.0, 0.0])
    reg = register(PolicyRegistry(), uni, 10)
    assert average_propensity(reg, None, 1) == pytest.approx(0.5)
    reg2 = register(reg, det, 10)
    assert average_propensity(reg2, None, 0) == pytest.approx(0.75)
    assert average_propensity(reg2, None, 1) > 0
    same = register(register(PolicyRegistry(), det, 10), det, 30)
    assert average_propensity(same, None, 0) == pytest.approx(1.0)
    assert same.total == 40 and len(reg) == 1
    assert average_propensity(register(PolicyRegistry(), SoftmaxPolicy(5), 3), None, 2) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        register(reg, uni, 0)
    with pytest.raises(ValueError):
        PolicyRegistry().average_probs(np.zeros((1, 0)))


def test_mlp_dimension_mismatch():
    pol = MLPPolicy(2, 3, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        eval_probs(pol, np.zeros(5))


def test_policy_json_round_trip():
    pols = [SoftmaxPolicy(3, [0.1, 0.2, -1]), MLPPolicy(2, 4, rng=np.random.default_rng(1))]
    pols.append(MixturePolicy([pols[0], SoftmaxPolicy(3)], [0.3, 0.7], learnable=0))
    x = np.array([[0.0, 1.5], [1.0, -0.3]])
    for p in pols:
        q = policy_from_dict(p.to_dict())
        assert np.array_equal(q.weights, p.weights)
        assert np.allclose(q.probs(x if p.input_dim else np.zeros((2, 0))), p.probs(x if p.input_dim else np.zeros((2, 0))))


@given(logits)
def test_simplex_property(w):
    p = eval_probs(SoftmaxPolicy(len(w), w))
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9


@given(st.integers(0, 10 ** 6))
def test_mlp_simplex_and_score_zero(seed):
    rng = np.random.default_rng(seed)
    pol = MLPPolicy(2, 4, rng=rng)
    x = rng.normal(size=2)
    p = eval_probs(pol, x)
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9
    expected = sum(p[z] * log_prob_grad(pol, x, z) for z in range(4))
    assert np.max(np.abs(expected)) < 1e-8


@given(logits)
def test_softmax_score_zero(w):
    pol = SoftmaxPolicy(len(w), w)
    p = eval_probs(pol)
    expected = sum(p[z] * log_prob_grad(pol, None, z) for z in range(len(w)) if p[z] > 0)
    assert np.max(np.abs(expected)) < 1e-8


def test_gradient_matches_fd_on_random_triples():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        if rng.random() < 0.5:
            pol, x = SoftmaxPolicy(3, rng.normal(size=3)), None
        else:
            pol, x = MLPPolicy(2, 3, rng=rng), rng.normal(size=2)
        z = int(rng.integers(3))
        worst = max(worst, np.max(np.abs(_fd_log_prob(pol, x, z) - log_prob_grad(pol, x, z))))
    assert worst < 1e-5


@given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3), st.integers(1, 100), st.integers(1, 100))
def test_effective_support(p, n1, extra):
    if sum(p) == 0:
        return
    p = np.array(p) / sum(p)
    past = SoftmaxPolicy.from_probs(p)
    reg = register(PolicyRegistry(), past, n1)
    learn = SoftmaxPolicy.from_probs([1.0, 0.0, 0.0])
    eff = eval_probs(effective_policy(reg, learn, n1, n1 + extra))
    assert np.all(eff[p > 0] > 0)
