"""Ancestral sampling and denoising through the learned reverse chain.

Two update rules are available.  ``STANDARD`` uses the posterior-mean
parameterisation ``(x - beta/sqrt(1-abar) * eps_hat) / sqrt(alpha)`` and adds
``sigma_k * z`` with no noise on the final step.  ``PAPER_LITERAL`` keeps the
alternative form with ``sqrt(beta)`` in the mean and ``beta * z`` as the
additive noise, on every step.

The chain always evaluates the predictor at ``k = K, K-1, ..., 1``.  Each
trajectory draws from its own counter-based stream, so sample ``i`` does not
depend on how many other samples are generated alongside it.
"""

from __future__ import annotations

import enum

import numpy as np

from drfm import rng
from drfm.errors import NumericalError
from drfm.model import predict_noise
from drfm.schedule import VarianceSchedule


class SamplerVariant(enum.Enum):
    STANDARD = "standard"
    PAPER_LITERAL = "literal"

    @classmethod
    def parse(cls, value) -> "SamplerVariant":
        if isinstance(value, cls):
            return value
        v = str(value).strip().lower().replace("-", "_")
        for member in cls:
            if v in (member.value, member.name.lower()):
                return member
        raise ValueError(f"unknown sampler variant {value!r}; expected standard or literal")


class NoiseRule(enum.Enum):
    """Standard deviation of the additive noise in the STANDARD variant."""

    BETA = "beta"            # sqrt(beta_k)
    POSTERIOR = "posterior"  # sqrt(posterior beta_k)
    NONE = "none"            # deterministic trajectory

    @classmethod
    def parse(cls, value) -> "NoiseRule":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown noise rule {value!r}; expected beta, posterior or none") from None


def noise_scale(schedule: VarianceSchedule, k, variant: SamplerVariant, noise: NoiseRule):
    variant = SamplerVariant.parse(variant)
    noise = NoiseRule.parse(noise)
    ks = schedule.check_timestep(k)
    if variant is SamplerVariant.PAPER_LITERAL:
        scale = schedule.betas[ks - 1]
    elif noise is NoiseRule.NONE:
        scale = np.zeros(ks.shape)
    else:
        table = schedule.betas if noise is NoiseRule.BETA else schedule.posterior_betas
        scale = np.where(ks > 1, np.sqrt(table[ks - 1]), 0.0)
    return float(scale) if ks.ndim == 0 else scale.reshape(ks.shape + (1,))


def reverse_step(schedule: VarianceSchedule, x_k, k, eps_hat, z,
                 variant: SamplerVariant = SamplerVariant.STANDARD,
                 noise: NoiseRule = NoiseRule.BETA) -> np.ndarray:
    """One reverse update ``x_k -> x_{k-1}`` given the noise prediction and a draw ``z``."""
    variant = SamplerVariant.parse(variant)
    x_k = np.asarray(x_k, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    beta = schedule.beta(k)
    om = schedule.one_minus_alpha_bar(k)
    if variant is SamplerVariant.PAPER_LITERAL:
        mean = (x_k - np.sqrt(beta) / np.sqrt(om) * eps_hat) / np.sqrt(1.0 - beta)
    else:
        mean = (x_k - beta / np.sqrt(om) * eps_hat) / np.sqrt(1.0 - beta)
    return mean + noise_scale(schedule, k, variant, noise) * z


def _draws(seed: int, purpose: int, n: int, steps: int, d: int) -> np.ndarray:
    """Per-trajectory normals, shape (n, steps + 1, d); row 0 is the start point."""
    out = np.empty((n, steps + 1, d))
    for i in range(n):
        out[i] = rng.stream(seed, purpose, i).standard_normal((steps + 1, d))
    return out


def run_chain(checkpoint, x_start, k_start: int, draws: np.ndarray,
              variant: SamplerVariant = SamplerVariant.STANDARD,
              noise: NoiseRule = NoiseRule.BETA) -> np.ndarray:
    """Iterate reverse steps from ``k_start`` down to 1 for a (n, d) batch.

    ``draws[:, j]`` supplies ``z`` for timestep ``j`` (index 0 is unused here).
    """
    schedule = checkpoint.schedule()
    params = checkpoint.params()
    features = checkpoint.features()
    x = np.array(x_start, dtype=np.float64)
    n = x.shape[0]
    for k in range(int(k_start), 0, -1):
        ks = np.full(n, k)
        eps_hat = predict_noise(params, features, x, ks, schedule)
        x = reverse_step(schedule, x, ks, eps_hat, draws[:, k], variant, noise)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite state after reverse step at timestep {k}")
    return x


def sample(checkpoint, count: int, seed: int = 0,
           variant: SamplerVariant = SamplerVariant.STANDARD,
           noise: NoiseRule = NoiseRule.BETA) -> np.ndarray:
    """Generate ``count`` samples starting from ``x_K ~ N(0, I)``."""
    if int(count) < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    d, _, K = checkpoint.dims
    draws = _draws(seed, rng.SAMPLE, int(count), K, d)
    return run_chain(checkpoint, draws[:, 0], K, draws, variant, noise)


def denoise(checkpoint, x_noisy, k_start: int, seed: int = 0,
            variant: SamplerVariant = SamplerVariant.STANDARD,
            noise: NoiseRule = NoiseRule.BETA) -> np.ndarray:
    """Run the reverse chain from ``k_start`` to 1 starting at ``x_noisy``.

    ``x_noisy`` is taken to be on the forward marginal at ``k_start`` (signal
    already scaled by ``sqrt(abar)``); accepts one vector or a (n, d) batch.
    """
    d, _, K = checkpoint.dims
    if not 1 <= int(k_start) <= K:
        raise ValueError(f"timestep {k_start} out of range 1..{K}")
    x = np.asarray(x_noisy, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise ValueError(f"input has dimension {x.shape[1]}, checkpoint expects {d}")
    draws = _draws(seed, rng.DENOISE, x.shape[0], K, d)
    out = run_chain(checkpoint, x, int(k_start), draws, variant, noise)
    return out[0] if single else out


def match_noise_level(corruption_sigma: float, schedule: VarianceSchedule) -> int:
    """Timestep whose noise-to-signal ratio best matches additive noise of std ``corruption_sigma``."""
    if not corruption_sigma > 0:
        raise ValueError(f"corruption sigma must be positive, got {corruption_sigma}")
    gap = np.abs(schedule.snr_ratio() - float(corruption_sigma) ** 2)
    return int(np.argmin(gap)) + 1  # argmin keeps the first (smallest k) on ties


def denoise_corrupted(checkpoint, x_corrupted, corruption_sigma: float, seed: int = 0,
                      variant: SamplerVariant = SamplerVariant.STANDARD,
                      noise: NoiseRule = NoiseRule.BETA) -> tuple[np.ndarray, int]:
    """Denoise ``x + sigma * eps`` by rescaling onto the matching forward marginal.

    Returns the cleaned signal and the entry timestep.
    """
    schedule = checkpoint.schedule()
    k = match_noise_level(corruption_sigma, schedule)
    scaled = np.sqrt(schedule.alpha_bar(k)) * np.asarray(x_corrupted, dtype=np.float64)
    return denoise(checkpoint, scaled, k, seed, variant, noise), k
