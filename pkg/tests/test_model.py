import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drfm.model import (
    TWO_PI,
    ModelMode,
    RandomFeatures,
    RhoSpec,
    TrainableParams,
    init_features,
    init_params,
    predict_noise,
    predict_via_coefficients,
    rf_coefficients,
    score_from_eps,
)
from drfm.schedule import default_schedule


def random_model(seed, d=3, n=7, K=5):
    gen = np.random.default_rng(seed)
    features = RandomFeatures(gen.normal(size=(d, n)), gen.uniform(0, TWO_PI, n), RhoSpec(1.0), 0)
    params = TrainableParams(gen.uniform(0, TWO_PI, (K, n)), gen.normal(size=(n, d)))
    return params, features, gen


def test_init_features_deterministic():
    a = init_features(5, 9, seed=11)
    b = init_features(5, 9, seed=11)
    np.testing.assert_array_equal(a.W, b.W)
    np.testing.assert_array_equal(a.b, b.b)
    c = init_features(5, 9, seed=12)
    assert not np.array_equal(a.W, c.W)


def test_init_features_rejects_degenerate_sigma():
    with pytest.raises(ValueError):
        init_features(3, 4, RhoSpec(gaussian_sigma=0.0))
    with pytest.raises(ValueError):
        init_features(3, 4, RhoSpec(gaussian_sigma=-1.0))
    with pytest.raises(ValueError):
        init_features(0, 4)


def test_init_features_moments():
    f = init_features(1000, 1000, RhoSpec(gaussian_sigma=1.0), seed=0)
    assert abs(f.W.mean()) <= 4 / math.sqrt(1e6)
    assert abs(f.W.var() - 1.0) <= 0.02
    assert f.b.min() >= 0.0 and f.b.max() < TWO_PI


def test_default_sigma_is_inverse_sqrt_d():
    f = init_features(400, 2000, seed=1)
    assert abs(f.W.std() - 1 / 20) < 0.002


def test_init_params_modes():
    p = init_params(4, 6, 2, ModelMode.DRFM, seed=3)
    assert p.theta1.shape == (4, 6) and p.theta2.shape == (6, 2)
    assert np.all(p.theta2 == 0)
    assert np.all((p.theta1 >= 0) & (p.theta1 < TWO_PI))
    rf = init_params(4, 6, 2, ModelMode.RF, seed=3)
    assert np.all(rf.theta1 == 0)
    np.testing.assert_array_equal(init_params(4, 6, 2, ModelMode.NN, seed=3).theta1, p.theta1)


def test_mode_parse_and_trainable():
    assert ModelMode.parse("rf") is ModelMode.RF
    assert ModelMode.parse("NN") is ModelMode.NN
    assert ModelMode.parse(0) is ModelMode.DRFM
    assert set(ModelMode.NN.trainable) == {"W", "b", "theta1", "theta2"}
    assert ModelMode.RF.trainable == ("theta2",)
    assert set(ModelMode.DRFM.trainable) == {"theta1", "theta2"}
    with pytest.raises(ValueError):
        ModelMode.parse("cnn")


def test_zero_readout_gives_zero():
    params, features, gen = random_model(0)
    params.theta2[:] = 0
    np.testing.assert_array_equal(predict_noise(params, features, gen.normal(size=3), 2), np.zeros(3))


def test_hand_example():
    features = RandomFeatures(np.array([[math.pi / 2]]), np.array([0.0]), RhoSpec(1.0), 0)
    params = TrainableParams(np.array([[math.pi / 3]]), np.array([[0.8]]))
    out = predict_noise(params, features, np.array([1.0]), 1)
    assert abs(out[0] - 0.4) < 1e-15


def test_zero_time_row_is_plain_rf():
    params, features, gen = random_model(1)
    params.theta1[2] = 0.0
    x = gen.normal(size=3)
    want = sum(math.sin(x @ features.W[:, j] + features.b[j]) * params.theta2[j] for j in range(7))
    np.testing.assert_allclose(predict_noise(params, features, x, 3), want, rtol=1e-13)
    np.testing.assert_array_equal(rf_coefficients(params, 3), params.theta2)


def test_quarter_turn_row_kills_coefficients():
    params, _, _ = random_model(2)
    params.theta1[0] = math.pi / 2
    assert np.max(np.abs(rf_coefficients(params, 1))) < 1e-15 * np.max(np.abs(params.theta2)) * 10


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_two_path_evaluation(seed, k):
    params, features, gen = random_model(seed)
    x = gen.normal(size=(100, 3))
    a = predict_noise(params, features, x, k)
    b = predict_via_coefficients(features, rf_coefficients(params, k), x)
    assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.max(np.abs(a)))


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_output_bound(seed):
    params, features, gen = random_model(seed)
    x = gen.normal(0, 10, size=(50, 3))
    ks = gen.integers(1, 6, size=50)
    out = predict_noise(params, features, x, ks)
    assert np.all(np.abs(out) <= np.sum(np.abs(params.theta2), axis=0) + 1e-12)


def test_batch_matches_single():
    params, features, gen = random_model(4)
    x = gen.normal(size=(6, 3))
    ks = np.array([1, 2, 3, 4, 5, 1])
    batch = predict_noise(params, features, x, ks)
    for i in range(6):
        np.testing.assert_allclose(batch[i], predict_noise(params, features, x[i], int(ks[i])), rtol=1e-13)


def test_deterministic_evaluation():
    params, features, gen = random_model(5)
    x = gen.normal(size=(20, 3))
    a = predict_noise(params, features, x, 3)
    b = predict_noise(params, features, x, 3)
    assert a.tobytes() == b.tobytes()


def test_shape_and_timestep_errors():
    params, features, _ = random_model(6)
    with pytest.raises(ValueError):
        predict_noise(params, features, np.zeros(4), 1)
    with pytest.raises(ValueError):
        predict_noise(params, features, np.zeros(3), 6)
    with pytest.raises(ValueError):
        predict_noise(params, features, np.zeros(3), 0)
    with pytest.raises(ValueError):
        predict_noise(params, features, np.zeros(3), 1, default_schedule())


def test_score_from_eps():
    s = default_schedule()
    np.testing.assert_array_equal(score_from_eps(np.zeros(2), 10, s), np.zeros(2))
    gen = np.random.default_rng(0)
    x0, eps = gen.normal(size=2), gen.normal(size=2)
    for k in (1, 37, 100):
        x_k = s.forward_jump(x0, k, eps)
        np.testing.assert_allclose(score_from_eps(eps, k, s), s.conditional_score(x_k, x0, k), rtol=1e-12)


def test_score_scale_at_last_step_high_precision():
    s = default_schedule()
    mpmath.mp.dps = 50
    abar = mpmath.mpf(1)
    for beta in s.betas:
        abar *= 1 - mpmath.mpf(float(beta))
    want = float(1 / mpmath.sqrt(1 - abar))
    got = -score_from_eps(np.array([1.0]), 100, s)[0]
    assert abs(got - want) <= 1e-12 * want
