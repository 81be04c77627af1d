import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drfm.data_io import checkpoint_bytes
from drfm.errors import NumericalError
from drfm.model import (
    TWO_PI,
    ModelMode,
    RandomFeatures,
    RhoSpec,
    TrainableParams,
    init_features,
    init_params,
)
from drfm.schedule import default_schedule, linear_schedule
from drfm.training import (
    LossWeighting,
    OptimizerState,
    TrainConfig,
    adam_step,
    backward,
    example_weights,
    loss_batch,
    train,
)
from drfm.verify import finite_difference_grads


def instance(seed, d=4, n=8, K=5, B=3):
    gen = np.random.default_rng(seed)
    sched = linear_schedule(1e-3, 0.2, K)
    features = RandomFeatures(gen.normal(size=(d, n)), gen.uniform(0, TWO_PI, n), RhoSpec(1.0), 0)
    params = TrainableParams(gen.uniform(0, TWO_PI, (K, n)), gen.normal(size=(n, d)))
    x0 = gen.uniform(-1, 1, (B, d))
    ks = gen.integers(1, K + 1, size=B)
    eps = gen.normal(size=(B, d))
    return params, features, sched, x0, ks, eps


def test_zero_readout_loss_is_noise_energy():
    params, features, sched, x0, ks, eps = instance(0)
    params.theta2[:] = 0
    assert loss_batch(params, features, sched, x0, ks, eps) == pytest.approx(np.mean(np.sum(eps**2, 1)), rel=1e-15)
    assert loss_batch(params, features, sched, x0, ks, 0 * eps) == 0.0


def test_hand_example_loss():
    sched = linear_schedule(0.01, 0.02, 2)
    features = RandomFeatures(np.array([[math.pi / 2]]), np.array([0.0]), RhoSpec(1.0), 0)
    params = TrainableParams(np.array([[math.pi / 3], [math.pi / 3]]), np.array([[0.8]]))
    eps = np.array([[1.0]])
    # choose x0 so that the noised point lands exactly on x = 1
    ab = sched.alpha_bars[0]
    x0 = np.array([[(1.0 - math.sqrt(1 - ab)) / math.sqrt(ab)]])
    assert loss_batch(params, features, sched, x0, np.array([1]), eps) == pytest.approx(0.36, abs=1e-12)


def test_weights():
    s = default_schedule()
    ks = np.array([1, 50, 100])
    np.testing.assert_array_equal(example_weights(s, ks, "unweighted"), np.ones(3))
    w = example_weights(s, ks, LossWeighting.DDPM_WEIGHTED)
    np.testing.assert_allclose(w, 1 / (2 * s.alphas[ks - 1] * (1 - s.alpha_bars[ks - 1])), rtol=1e-12)


def test_zero_readout_kills_time_gradient():
    params, features, sched, x0, ks, eps = instance(1)
    params.theta2[:] = 0
    g = backward(params, features, sched, x0, ks, eps, ModelMode.NN)
    assert not np.any(g.g_theta1)
    assert not np.any(g.g_W) and not np.any(g.g_b)


def test_inactive_time_rows_have_zero_gradient():
    params, features, sched, x0, _, eps = instance(2)
    ks = np.full(3, 4)
    g = backward(params, features, sched, x0, ks, eps, ModelMode.DRFM)
    assert not np.any(np.delete(g.g_theta1, 3, axis=0))
    assert np.any(g.g_theta1[3])


def test_frozen_tensors_get_zero_gradients():
    params, features, sched, x0, ks, eps = instance(3)
    g = backward(params, features, sched, x0, ks, eps, ModelMode.RF)
    assert not np.any(g.g_theta1) and not np.any(g.g_W) and not np.any(g.g_b)
    g = backward(params, features, sched, x0, ks, eps, ModelMode.DRFM)
    assert not np.any(g.g_W) and not np.any(g.g_b)


@pytest.mark.parametrize("mode", list(ModelMode))
@pytest.mark.parametrize("weighting", list(LossWeighting))
def test_small_instance_matches_finite_differences(mode, weighting):
    params, features, sched, x0, ks, eps = instance(4)
    if mode is ModelMode.RF:
        params.theta1[:] = 0
    g = backward(params, features, sched, x0, ks, eps, mode, weighting).as_dict()
    fd = finite_difference_grads(params, features, sched, x0, ks, eps, weighting, mode.trainable)
    for name in mode.trainable:
        rel = np.abs(g[name] - fd[name]) / np.maximum(np.maximum(np.abs(g[name]), np.abs(fd[name])), 1e-300)
        assert rel.max() < 1e-5, name


def test_finite_differences_catch_a_wrong_gradient():
    params, features, sched, x0, ks, eps = instance(5)
    g = backward(params, features, sched, x0, ks, eps).as_dict()
    fd = finite_difference_grads(params, features, sched, x0, ks, eps, "unweighted", ["theta2"])
    wrong = 0.5 * g["theta2"]
    assert np.max(np.abs(wrong - fd["theta2"]) / np.abs(fd["theta2"])) > 0.1


def test_adam_zero_gradient_is_noop():
    p = {"x": np.array([1.0, -2.0])}
    before = p["x"].copy()
    state = OptimizerState()
    for _ in range(2):
        adam_step(p, {"x": np.zeros(2)}, state, 0.1)
        np.testing.assert_array_equal(p["x"], before)
    assert state.step == 2


def test_adam_first_step_magnitude():
    p = {"x": np.array([0.0])}
    adam_step(p, {"x": np.array([1.0])}, OptimizerState(), 1e-3)
    assert p["x"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


@given(st.floats(1e-3, 1e3), st.floats(1e-5, 1e-1))
def test_adam_first_step_is_sign_times_lr(g, lr):
    p = {"x": np.array([0.0])}
    adam_step(p, {"x": np.array([-g])}, OptimizerState(), lr)
    assert p["x"][0] == pytest.approx(lr * g / (g + 1e-8), rel=1e-9)


def test_adam_rejects_non_finite():
    with pytest.raises(NumericalError):
        adam_step({"x": np.zeros(1)}, {"x": np.array([np.nan])}, OptimizerState(), 1e-3)


def test_config_validation():
    for bad in (dict(epochs=0), dict(learning_rate=0), dict(adam_beta1=1.0), dict(batch=0),
                dict(n_features=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    with pytest.raises(ValueError):
        TrainConfig(mode="cnn")
    with pytest.raises(ValueError):
        train(np.zeros((4, 2)), TrainConfig(epochs=0), default_schedule())


def gaussian_data(n=200, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 2))


def test_training_is_deterministic():
    cfg = TrainConfig(epochs=30, n_features=32, learning_rate=1e-2, seed=9)
    a = train(gaussian_data(), cfg, default_schedule())
    b = train(gaussian_data(), cfg, default_schedule())
    assert a.losses == b.losses
    assert checkpoint_bytes(a.checkpoint) == checkpoint_bytes(b.checkpoint)


def test_training_reduces_loss():
    cfg = TrainConfig(epochs=400, n_features=64, learning_rate=1e-2, seed=1)
    r = train(gaussian_data(), cfg, default_schedule())
    assert np.mean(r.losses[-40:]) < r.losses[0]


@pytest.mark.parametrize("mode", list(ModelMode))
def test_frozen_tensors_bit_identical(mode):
    cfg = TrainConfig(epochs=20, n_features=16, learning_rate=1e-2, seed=2, mode=mode)
    r = train(gaussian_data(50), cfg, default_schedule())
    f0 = init_features(2, 16, seed=2)
    p0 = init_params(100, 16, 2, mode, seed=2)
    trained = {"W": r.features.W, "b": r.features.b, "theta1": r.params.theta1, "theta2": r.params.theta2}
    init = {"W": f0.W, "b": f0.b, "theta1": p0.theta1, "theta2": p0.theta2}
    for name in trained:
        same = np.array_equal(trained[name], init[name])
        assert same == (name not in mode.trainable), name


def test_minibatch_and_checkpoint_callback():
    seen = []
    cfg = TrainConfig(epochs=6, n_features=8, batch=16, checkpoint_every=2, seed=0)
    r = train(gaussian_data(40), cfg, default_schedule(), on_checkpoint=lambda e, c: seen.append((e, c.epochs)))
    assert seen == [(2, 2), (4, 4), (6, 6)]
    assert len(r.losses) == 6 and r.checkpoint.epochs == 6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_numerical_error():
    cfg = TrainConfig(epochs=5, n_features=8, learning_rate=1e308, seed=0)
    with pytest.raises(NumericalError):
        train(gaussian_data(20), cfg, default_schedule())
