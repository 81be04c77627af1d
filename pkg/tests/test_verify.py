import math

import numpy as np
import pytest

from drfm.model import ModelMode
from drfm.schedule import default_schedule, linear_schedule
from drfm.verify import (
    GaussianSpec,
    LemmaExperimentConfig,
    Report,
    check_dsm_equivalence,
    check_forward_kl,
    check_gradients,
    check_lemma1,
    check_lemma2_scaling,
    ddpm_form_loss,
    dsm_form_loss,
    end_to_end_gaussian,
    forward_kl_gaussian,
    gaussian_kl_to_standard,
    lemma2_bound,
    monte_carlo_kl,
    run_suites,
)


def test_report_lines():
    r = Report("demo")
    r.add("x", 0.1)
    r.add("v", np.array([1.0, 2.5]))
    r.add("flag", True)
    r.gate("ok", True)
    assert r.lines() == ["check.demo.x=0.1", "check.demo.v=1.0,2.5", "check.demo.flag=true",
                         "check.demo.gate.ok=pass"]
    assert r.passed and r.value("x") == 0.1
    r.gate("bad", False)
    assert not r.passed


def test_gradient_check_small():
    r = check_gradients(trials=5)
    assert r.passed
    assert {"drfm.theta1.max_rel_err", "nn.W.max_rel_err", "nn.b.max_rel_err", "rf.theta2.max_rel_err"} <= {
        k for k, _ in r.metrics}


def test_dsm_degenerate_predictors():
    s = default_schedule()
    gen = np.random.default_rng(0)
    x0, eps = gen.uniform(-1, 1, (5, 2)), gen.normal(size=(5, 2))
    ks = gen.integers(1, 101, size=5)
    assert ddpm_form_loss(s, ks, eps, eps) == 0.0
    assert dsm_form_loss(s, x0, ks, eps, eps) < 1e-25
    zero = ddpm_form_loss(s, ks, eps, 0 * eps)
    want = np.mean(np.sum(eps**2, 1) / (2 * s.alphas[ks - 1] * (1 - s.alpha_bars[ks - 1])))
    assert zero == pytest.approx(want, rel=1e-12)
    assert dsm_form_loss(s, x0, ks, eps, 0 * eps) == pytest.approx(zero, rel=1e-12)
    assert check_dsm_equivalence(trials=10).passed


def test_lemma1_small():
    r = check_lemma1(trials=10)
    assert r.passed


def test_lemma2_identical_draws_and_bound():
    cfg = LemmaExperimentConfig(feature_counts=(16, 64), trials=10, reference_factor=20)
    r = check_lemma2_scaling(cfg)
    assert r.value("identical_draws_error") == 0.0
    assert lemma2_bound(1.0, 2, 16, 0.05) == pytest.approx(math.sqrt(2) / 4 * (1 + math.sqrt(2 * math.log(20))))


def test_lemma2_config_validation():
    for bad in (dict(C=0), dict(feature_counts=(64, 16)), dict(trials=3), dict(delta=1.0)):
        with pytest.raises(ValueError):
            LemmaExperimentConfig(**bad).validate()


def test_gaussian_spec_validation():
    with pytest.raises(ValueError):
        GaussianSpec([0, 0], [[1, 0.5], [0.4, 1]])
    with pytest.raises(ValueError):
        GaussianSpec([0, 0], [[1, 2], [2, 1]])
    with pytest.raises(ValueError):
        GaussianSpec([0, 0, 0], np.eye(2))
    assert GaussianSpec([3, 0], np.eye(2)).second_moment == 11.0


def test_forward_kl_examples(schedule):
    zero = GaussianSpec(np.zeros(2), np.eye(2))
    assert all(abs(forward_kl_gaussian(zero, schedule, k)) < 1e-15 for k in (1, 50, 100))
    spec = GaussianSpec([3.0, 0.0], np.eye(2))
    kls = [forward_kl_gaussian(spec, schedule, k) for k in range(1, 101)]
    assert all(b < a for a, b in zip(kls, kls[1:]))
    assert kls[-1] == pytest.approx(schedule.alpha_bars[-1] * 9 / 2, rel=1e-12)
    est, se = monte_carlo_kl(spec, schedule, 100, 100_000, np.random.default_rng(0))
    assert abs(est - kls[-1]) < 3 * se


def test_gaussian_kl_general_covariance():
    cov = np.array([[2.0, 0.3], [0.3, 0.5]])
    mu = np.array([0.4, -1.0])
    want = 0.5 * (np.trace(cov) + mu @ mu - 2 - math.log(np.linalg.det(cov)))
    assert gaussian_kl_to_standard(mu, cov) == pytest.approx(want, rel=1e-12)
    spec = GaussianSpec(mu, cov)
    s = default_schedule()
    est, se = monte_carlo_kl(spec, s, 30, 100_000, np.random.default_rng(1))
    assert abs(est - forward_kl_gaussian(spec, s, 30)) < 3 * se


def test_forward_kl_report_passes():
    assert check_forward_kl(samples=50_000).passed


def test_suites_are_deterministic():
    a = [line for r in run_suites("lemma1", seed=7) for line in r.lines()]
    b = [line for r in run_suites("lemma1", seed=7) for line in r.lines()]
    assert a == b
    with pytest.raises(KeyError):
        run_suites("nope")


@pytest.mark.slow
def test_end_to_end_shifted_mean():
    spec = GaussianSpec([2.0, -1.0], np.eye(2))
    r = end_to_end_gaussian(spec, epochs=3000, schedule=linear_schedule(1e-4, 0.1, 100), seed=0)
    print("\n".join(r.lines()[:8]))
    assert r.value("mean_z").max() <= 5.0


def test_end_to_end_requires_2d():
    with pytest.raises(ValueError):
        end_to_end_gaussian(GaussianSpec([0.0], [[1.0]]), epochs=1)


def test_end_to_end_smoke():
    r = end_to_end_gaussian(GaussianSpec([0.0, 0.0], np.eye(2)), train_n=50, epochs=5,
                            samples=20, n_features=8, baseline=True, mode=ModelMode.DRFM)
    assert len(r.value("weighted_loss_by_k")) == 100
    assert np.isfinite(r.value("rf_minus_drfm_weighted_loss"))
