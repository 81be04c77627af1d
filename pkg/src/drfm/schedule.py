"""Variance schedule and the closed-form forward / reverse-posterior quantities.

Timesteps are 1-indexed (``k in 1..K``); tables are stored 0-indexed, so the
value for step ``k`` lives at ``table[k - 1]``.  ``alpha_bar_0`` is taken to be
1, which makes the posterior variance at ``k = 1`` exactly zero.

Every method accepts either a scalar timestep or an integer array of
timesteps paired row-wise with a batch of vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class VarianceSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)
    one_minus_alpha_bars: np.ndarray = field(init=False, repr=False)
    posterior_betas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if not np.all(np.isfinite(betas)):
            raise ValueError("betas must be finite")
        if betas[0] <= 0.0 or betas[-1] >= 1.0:
            raise ValueError(
                f"betas must lie in (0, 1); got first={betas[0]!r}, last={betas[-1]!r}"
            )
        if np.any(np.diff(betas) <= 0.0):
            raise ValueError("betas must be strictly increasing")

        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        # 1 - abar via expm1 of the log-sum keeps full relative accuracy at
        # small k, where the direct subtraction loses ~log10(1/beta_1) digits
        one_minus = -np.expm1(np.cumsum(np.log1p(-betas)))
        one_minus[0] = betas[0]
        one_minus_prev = np.concatenate(([0.0], one_minus[:-1]))
        posterior_betas = one_minus_prev / one_minus * betas

        for arr in (betas, alphas, alpha_bars, one_minus, posterior_betas):
            arr.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "one_minus_alpha_bars", one_minus)
        object.__setattr__(self, "posterior_betas", posterior_betas)

    @property
    def steps(self) -> int:
        return int(self.betas.size)

    def __len__(self) -> int:
        return self.steps

    def __eq__(self, other) -> bool:
        if not isinstance(other, VarianceSchedule):
            return NotImplemented
        return np.array_equal(self.betas, other.betas)

    # -- indexing helpers -------------------------------------------------

    def check_timestep(self, k) -> np.ndarray:
        """Validate ``k`` (scalar or array) and return it as an int array."""
        ks = np.asarray(k)
        if ks.dtype.kind not in "iu":
            if ks.dtype.kind == "f" and np.all(ks == np.round(ks)):
                ks = ks.astype(np.int64)
            else:
                raise ValueError(f"timestep must be an integer, got {k!r}")
        if ks.size == 0:
            raise ValueError("empty timestep array")
        lo, hi = int(ks.min()), int(ks.max())
        if lo < 1 or hi > self.steps:
            bad = lo if lo < 1 else hi
            raise ValueError(f"timestep {bad} out of range 1..{self.steps}")
        return ks.astype(np.int64)

    def _coef(self, table: np.ndarray, k) -> np.ndarray | float:
        ks = self.check_timestep(k)
        vals = table[ks - 1]
        if ks.ndim == 0:
            return float(vals)
        # one coefficient per batch row, broadcast across the feature axis
        return vals.reshape(ks.shape + (1,))

    def alpha_bar_prev(self, k):
        ks = self.check_timestep(k)
        prev = np.where(ks > 1, self.alpha_bars[np.maximum(ks - 2, 0)], 1.0)
        if ks.ndim == 0:
            return float(prev)
        return prev.reshape(ks.shape + (1,))

    def one_minus_alpha_bar(self, k):
        return self._coef(self.one_minus_alpha_bars, k)

    def one_minus_alpha_bar_prev(self, k):
        ks = self.check_timestep(k)
        prev = np.where(ks > 1, self.one_minus_alpha_bars[np.maximum(ks - 2, 0)], 0.0)
        if ks.ndim == 0:
            return float(prev)
        return prev.reshape(ks.shape + (1,))

    def beta(self, k):
        return self._coef(self.betas, k)

    def alpha(self, k):
        return self._coef(self.alphas, k)

    def alpha_bar(self, k):
        return self._coef(self.alpha_bars, k)

    # -- forward process --------------------------------------------------

    def forward_step(self, x_prev, k, eps) -> np.ndarray:
        """One Markov step ``x_{k-1} -> x_k`` with caller-supplied noise."""
        beta = self.beta(k)
        return np.sqrt(1.0 - beta) * _as_f64(x_prev) + np.sqrt(beta) * _as_f64(eps)

    def forward_jump(self, x0, k, eps) -> np.ndarray:
        """Sample ``x_k`` directly from ``x_0`` via the closed-form marginal."""
        ab = self.alpha_bar(k)
        return np.sqrt(ab) * _as_f64(x0) + np.sqrt(self.one_minus_alpha_bar(k)) * _as_f64(eps)

    # -- reverse posterior ------------------------------------------------

    def posterior_mean(self, x_k, x0, k) -> np.ndarray:
        om = self.one_minus_alpha_bar(k)
        ab_prev = self.alpha_bar_prev(k)
        alpha = self.alpha(k)
        beta = self.beta(k)
        coef_xk = np.sqrt(alpha) * self.one_minus_alpha_bar_prev(k) / om
        coef_x0 = np.sqrt(ab_prev) * beta / om
        return coef_xk * _as_f64(x_k) + coef_x0 * _as_f64(x0)

    def posterior_mean_from_eps(self, x_k, eps, k) -> np.ndarray:
        """Posterior mean with ``x_0`` eliminated in favour of the noise."""
        om = self.one_minus_alpha_bar(k)
        alpha = self.alpha(k)
        beta = self.beta(k)
        return (_as_f64(x_k) - beta / np.sqrt(om) * _as_f64(eps)) / np.sqrt(alpha)

    def posterior_variance(self, k):
        return self._coef(self.posterior_betas, k)

    def conditional_score(self, x_k, x0, k) -> np.ndarray:
        """Gradient of ``log q(x_k | x_0)`` with respect to ``x_k``."""
        ab = self.alpha_bar(k)
        return -(_as_f64(x_k) - np.sqrt(ab) * _as_f64(x0)) / self.one_minus_alpha_bar(k)

    def snr_ratio(self) -> np.ndarray:
        """Noise-to-signal variance ratio ``(1 - abar_k) / abar_k`` for every k."""
        return self.one_minus_alpha_bars / self.alpha_bars


def linear_schedule(beta_start: float, beta_end: float, steps: int) -> VarianceSchedule:
    """Equally spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    if int(steps) != steps or steps < 2:
        raise ValueError(f"steps must be an integer >= 2, got {steps!r}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start < beta_end < 1, got ({beta_start!r}, {beta_end!r})"
        )
    return VarianceSchedule(np.linspace(beta_start, beta_end, int(steps), dtype=np.float64))


def default_schedule() -> VarianceSchedule:
    """100 linear steps from 1e-4 to 0.02."""
    return linear_schedule(1e-4, 0.02, 100)
