"""The DRFM noise predictor.

For timestep ``k`` the predictor is

    eps_hat(x, k) = (sin(x @ W + b) * cos(theta1[k - 1])) @ theta2

with a fixed random dictionary ``(W, b)``, one row of trainable time weights
``theta1`` per timestep and a shared readout ``theta2``.  Freezing ``k`` turns
it into a plain random-feature model with coefficients
``cos(theta1[k - 1])[:, None] * theta2``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from drfm import rng
from drfm.schedule import VarianceSchedule

TWO_PI = 2.0 * math.pi


class ModelMode(enum.Enum):
    """Which tensors are trained.

    DRFM trains ``theta1`` and ``theta2``; NN additionally trains ``W`` and
    ``b``; RF trains ``theta2`` only, with ``theta1`` pinned at zero.
    """

    DRFM = 0
    NN = 1
    RF = 2

    @classmethod
    def parse(cls, value) -> "ModelMode":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValueError(
                f"unknown mode {value!r}; expected one of drfm, nn, rf"
            ) from None

    @property
    def trainable(self) -> tuple[str, ...]:
        if self is ModelMode.DRFM:
            return ("theta1", "theta2")
        if self is ModelMode.NN:
            return ("W", "b", "theta1", "theta2")
        return ("theta2",)


@dataclass(frozen=True)
class RhoSpec:
    """Sampling law for the random dictionary.

    ``W`` entries are Normal(0, gaussian_sigma**2); ``None`` means ``1/sqrt(d)``.
    ``b`` entries are Uniform[bias_low, bias_high).
    """

    gaussian_sigma: float | None = None
    bias_low: float = 0.0
    bias_high: float = TWO_PI

    def sigma_for(self, d: int) -> float:
        sigma = 1.0 / math.sqrt(d) if self.gaussian_sigma is None else float(self.gaussian_sigma)
        if not (sigma > 0.0 and math.isfinite(sigma)):
            raise ValueError(f"rho gaussian_sigma must be positive and finite, got {sigma!r}")
        return sigma


@dataclass
class RandomFeatures:
    W: np.ndarray  # (d, N)
    b: np.ndarray  # (N,)
    rho: RhoSpec
    seed: int

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @property
    def n_features(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "RandomFeatures":
        return replace(self, W=self.W.copy(), b=self.b.copy())

    def activations(self, x: np.ndarray) -> np.ndarray:
        """``x @ W + b`` for a single vector or a batch of rows."""
        return np.asarray(x, dtype=np.float64) @ self.W + self.b


@dataclass
class TrainableParams:
    theta1: np.ndarray  # (K, N)
    theta2: np.ndarray  # (N, d)

    def copy(self) -> "TrainableParams":
        return TrainableParams(self.theta1.copy(), self.theta2.copy())


def init_features(d: int, n_features: int, rho: RhoSpec | None = None, seed: int = 0) -> RandomFeatures:
    if int(d) < 1 or int(n_features) < 1:
        raise ValueError(f"dimensions must be positive, got d={d}, N={n_features}")
    rho = rho or RhoSpec()
    sigma = rho.sigma_for(int(d))
    if not rho.bias_low < rho.bias_high:
        raise ValueError("rho bias range is empty")
    gen = rng.stream(seed, rng.FEATURES)
    W = gen.normal(0.0, sigma, size=(int(d), int(n_features)))
    b = gen.uniform(rho.bias_low, rho.bias_high, size=int(n_features))
    return RandomFeatures(W=W, b=b, rho=rho, seed=rng.check_seed(seed))


def init_params(steps: int, n_features: int, d: int, mode: ModelMode = ModelMode.DRFM,
                seed: int = 0) -> TrainableParams:
    """Time weights Uniform[0, 2pi) (zeros for RF), readout zeros."""
    mode = ModelMode.parse(mode)
    if mode is ModelMode.RF:
        theta1 = np.zeros((steps, n_features))
    else:
        theta1 = rng.stream(seed, rng.THETA).uniform(0.0, TWO_PI, size=(steps, n_features))
    theta2 = np.zeros((n_features, d))
    return TrainableParams(theta1=theta1, theta2=theta2)


def _check_shapes(params: TrainableParams, features: RandomFeatures,
                  schedule: VarianceSchedule | None = None) -> None:
    d, n = features.W.shape
    if features.b.shape != (n,):
        raise ValueError(f"b has shape {features.b.shape}, expected ({n},)")
    if params.theta2.shape != (n, d):
        raise ValueError(f"theta2 has shape {params.theta2.shape}, expected ({n}, {d})")
    if params.theta1.ndim != 2 or params.theta1.shape[1] != n:
        raise ValueError(f"theta1 has shape {params.theta1.shape}, expected (K, {n})")
    if schedule is not None and params.theta1.shape[0] != schedule.steps:
        raise ValueError(
            f"theta1 has {params.theta1.shape[0]} rows but the schedule has {schedule.steps} steps"
        )


def _rows(params: TrainableParams, k) -> np.ndarray:
    ks = np.asarray(k)
    if ks.dtype.kind not in "iu":
        raise ValueError(f"timestep must be an integer, got {k!r}")
    K = params.theta1.shape[0]
    if ks.size == 0 or ks.min() < 1 or ks.max() > K:
        raise ValueError(f"timestep out of range 1..{K}")
    return ks.astype(np.int64) - 1


def predict_noise(params: TrainableParams, features: RandomFeatures, x, k,
                  schedule: VarianceSchedule | None = None) -> np.ndarray:
    """Evaluate the noise predictor.

    ``x`` may be a single d-vector with scalar ``k`` or a (B, d) batch with a
    length-B array of timesteps.
    """
    _check_shapes(params, features, schedule)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != features.dim:
        raise ValueError(f"input has dimension {x.shape[-1]}, model expects {features.dim}")
    rows = _rows(params, k)
    if x.ndim == 2 and rows.ndim == 0:
        rows = np.full(x.shape[0], rows)
    hidden = np.sin(features.activations(x)) * np.cos(params.theta1[rows])
    return hidden @ params.theta2


def rf_coefficients(params: TrainableParams, k: int) -> np.ndarray:
    """Per-timestep random-feature coefficients ``C[i, j] = cos(theta1[k, i]) * theta2[i, j]``."""
    row = _rows(params, k)
    if row.ndim != 0:
        raise ValueError("rf_coefficients takes a single timestep")
    return np.cos(params.theta1[row])[:, None] * params.theta2


def predict_via_coefficients(features: RandomFeatures, coefficients: np.ndarray, x) -> np.ndarray:
    """Plain random-feature model ``sin(x @ W + b) @ C``."""
    return np.sin(features.activations(x)) @ coefficients


def score_from_eps(eps_hat, k, schedule: VarianceSchedule) -> np.ndarray:
    """Score estimate implied by a noise prediction: ``-eps_hat / sqrt(1 - abar_k)``."""
    return -np.asarray(eps_hat, dtype=np.float64) / np.sqrt(schedule.one_minus_alpha_bar(k))
