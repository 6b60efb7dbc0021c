import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import collect, hand_dataset
from dia import _mlp
from dia.estimators import (EstimationError, EstimatorState, LogisticCIV, NeuralCIV, PredictionMSE, TwoStageLS,
                            fit_2sls, fit_two_stage, moment_eval, predict_f, proxy_mse)
from dia.policy import SoftmaxPolicy
from dia.sim import Dataset, DgpConfig, EvalSet, make_dgp, true_mse


def _hand_fit():
    return TwoStageLS("scalar", "raw").fit(hand_dataset())


def test_perfect_compliance():
    a = np.array([1, 0, 1, 1, 0])
    st_ = fit_2sls(Dataset.from_arrays(a, a, 2.0 * a, num_instruments=2), "scalar", "raw")
    assert st_.phi == pytest.approx([1.0]) and st_.theta == pytest.approx([2.0])


def test_hand_dataset_fit():
    st_ = _hand_fit()
    assert st_.phi == pytest.approx([0.5]) and st_.theta == pytest.approx([2.0])
    assert st_.q_norm < 1e-10 and st_.m_norm < 1e-10


def test_rank_deficient_raises():
    with pytest.raises(EstimationError):
        fit_2sls(Dataset.from_arrays([0, 0], [1, 0], [1, 0], num_instruments=2), "scalar", "raw")
    with pytest.raises(EstimationError):
        fit_2sls(Dataset.from_arrays([0, 0, 0], [1, 0, 1], [1, 0, 1], num_instruments=2))
    with pytest.raises(EstimationError):
        fit_2sls(Dataset.empty(2))


def test_consistency_at_large_n(iv10):
    data, _ = collect(iv10, SoftmaxPolicy(10), 20000, 3)
    st_ = fit_2sls(data)
    assert np.linalg.norm(st_.theta - iv10.theta0) < 0.1


def test_generic_path_matches_closed_form(iv10):
    data, _ = collect(iv10, SoftmaxPolicy(10), 2000, 1)
    for feats in ("indicator", "affine"):
        spec = TwoStageLS(feats)
        a, b = spec.fit(data), fit_two_stage(spec, data)
        assert b.converged
        assert np.max(np.abs(a.theta - b.theta)) < 1e-6 and np.max(np.abs(a.phi - b.phi)) < 1e-6


def test_generic_path_fixed_point():
    data = hand_dataset()
    spec = TwoStageLS("scalar", "raw")
    root = spec.fit(data)
    again = fit_two_stage(spec, data, init=root)
    assert np.array_equal(again.theta, root.theta) and np.array_equal(again.phi, root.phi)


def test_logistic_civ_moments_vanish():
    dgp = make_dgp(DgpConfig(kind="civ", num_instruments=3), seed=2)
    data, _ = collect(dgp, SoftmaxPolicy(3), 5000, 4)
    st_ = fit_two_stage(LogisticCIV(), data)
    assert st_.converged and st_.q_norm <= 1e-6 and st_.m_norm <= 1e-6
    assert max(np.abs(LogisticCIV().Q(st_.phi, data))) <= 1e-6
    p = LogisticCIV()._p(st_.phi, data)
    assert np.all((p > 0) & (p < 1))


def test_predict_examples():
    s = EstimatorState(np.array([2.0, 1.0]), np.zeros(2), TwoStageLS())
    assert predict_f(s, None, 1) == 2.0 and predict_f(s, None, 0) == 1.0
    c = EstimatorState(np.array([1.0, 1.0]), np.zeros(4), LogisticCIV())
    assert predict_f(c, [0.0, 0.5], 1) == pytest.approx(1.5)
    net = NeuralCIV(2, 2)
    theta, _ = net.initial()
    w = theta.copy()
    _, _, W2, b2 = net.f_shape.unpack(w)
    W2[:] = 0.0
    b2[:] = 0.7
    s = EstimatorState(w, np.zeros(net.d_shape.size), net)
    assert np.allclose(predict_f(s, np.random.default_rng(0).normal(size=(5, 2)), np.ones(5)), 0.7)


def test_proxy_mse_examples():
    ev = EvalSet(np.zeros((2, 0)), np.array([0.0, 1.0]))
    full = EstimatorState(np.array([2.0, 1.0]), np.zeros(2), TwoStageLS())
    sub = EstimatorState(np.array([1.0, 1.0]), np.zeros(2), TwoStageLS())
    assert proxy_mse(full, full, ev) == 0.0
    assert proxy_mse(sub, full, ev) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        proxy_mse(sub, full, EvalSet(np.zeros((0, 0)), np.zeros(0)))
    with pytest.raises(ValueError):
        proxy_mse(sub, EstimatorState(np.ones(2), np.zeros(4), LogisticCIV()), ev)


def test_proxy_equals_truth_when_reference_is_exact(iv10):
    truth = EstimatorState(np.asarray(iv10.theta0, float), np.zeros(10), TwoStageLS())
    sub = EstimatorState(np.array([0.3, 1.1]), np.zeros(10), TwoStageLS())
    assert proxy_mse(sub, truth, iv10.eval_set) == pytest.approx(true_mse(iv10, sub.theta))
    assert PredictionMSE.truth(TwoStageLS(), iv10).value(sub.theta) == pytest.approx(true_mse(iv10, sub.theta))


def test_moment_eval_examples():
    data = hand_dataset()
    spec = TwoStageLS("scalar", "raw")
    st_ = _hand_fit()
    q, m = moment_eval(spec, st_, data[2])
    assert q == pytest.approx([1.0]) and m == pytest.approx([0.0])
    q, m = moment_eval(spec, st_, data[1])
    assert q == pytest.approx([0.0]) and m == pytest.approx([0.0])
    assert abs(spec.Q(st_.phi, data)[0]) < 1e-10 and abs(spec.M(st_.theta, st_.phi, data)[0]) < 1e-10


@given(st.integers(0, 10 ** 6))
def test_permutation_symmetry(seed):
    rng = np.random.default_rng(seed)
    n = 60
    z = rng.integers(0, 3, n)
    z[:3] = [0, 1, 2]
    a = (rng.random(n) < 0.2 + 0.3 * z).astype(float)
    a[:3] = [0, 1, 1]
    y = 1.5 * a + rng.normal(size=n)
    data = Dataset.from_arrays(z, a, y, num_instruments=3)
    perm = rng.permutation(n)
    try:
        s1 = fit_2sls(data)
    except EstimationError:
        return
    s2 = fit_2sls(data.take(perm))
    assert np.allclose(s1.theta, s2.theta, rtol=1e-10, atol=1e-10)
    assert np.allclose(s1.phi, s2.phi, rtol=1e-12, atol=1e-12)


def test_logistic_permutation_symmetry():
    dgp = make_dgp(DgpConfig(kind="civ", num_instruments=2), seed=0)
    data, _ = collect(dgp, SoftmaxPolicy(2), 800, 9)
    perm = np.random.default_rng(1).permutation(len(data))
    a, b = fit_two_stage(LogisticCIV(), data), fit_two_stage(LogisticCIV(), data.take(perm))
    assert np.allclose(a.theta, b.theta, atol=1e-6) and np.allclose(a.phi, b.phi, atol=1e-6)


def test_neural_backprop_matches_fd():
    dgp = make_dgp(DgpConfig(kind="civ", num_instruments=2), seed=0)
    data, _ = collect(dgp, SoftmaxPolicy(2), 200, 5)
    net = NeuralCIV(2, 2)
    theta, phi = net.initial()
    rng = np.random.default_rng(0)
    h = 1e-6

    def loss_f(t):
        p = _mlp.sigmoid(_mlp.forward(net.d_shape, phi, net._din(data))[0][:, 0])
        f1 = net.predict(t, data.x, np.ones(len(data)))
        f0 = net.predict(t, data.x, np.zeros(len(data)))
        return np.mean((p * f1 + (1 - p) * f0 - data.y) ** 2)

    def loss_d(f):
        p = _mlp.sigmoid(_mlp.forward(net.d_shape, f, net._din(data))[0][:, 0])
        return np.mean(-data.a * np.log(p) - (1 - data.a) * np.log(1 - p))

    gM, gQ = net.M(theta, phi, data), net.Q(phi, data)
    worst = 0.0
    for _ in range(50):
        if rng.random() < 0.5:
            j = int(rng.integers(len(theta)))
            e = np.zeros_like(theta)
            e[j] = h
            fd, an = (loss_f(theta + e) - loss_f(theta - e)) / (2 * h), gM[j]
        else:
            j = int(rng.integers(len(phi)))
            e = np.zeros_like(phi)
            e[j] = h
            fd, an = (loss_d(phi + e) - loss_d(phi - e)) / (2 * h), gQ[j]
        worst = max(worst, abs(fd - an) / max(abs(an), 1e-6))
    assert worst < 1e-4


def test_neural_fit_reduces_moments():
    dgp = make_dgp(DgpConfig(kind="civ", num_instruments=2), seed=0)
    data, _ = collect(dgp, SoftmaxPolicy(2), 300, 6)
    net = NeuralCIV(2, 2)
    theta0, phi0 = net.initial()
    st_ = fit_two_stage(net, data)
    assert np.max(np.abs(net.Q(st_.phi, data))) < np.max(np.abs(net.Q(phi0, data)))
    assert st_.q_norm == pytest.approx(np.max(np.abs(net.Q(st_.phi, data))))
