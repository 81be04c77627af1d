"""Loss, hand-derived gradients, Adam, and the training loop.

Each epoch draws an independent timestep ``k ~ U{1..K}`` and fresh noise for
every example, forms ``x_k`` with the closed-form forward jump and minimises
the noise-prediction error.  All randomness for epoch ``e`` comes from the
counter-based stream ``(seed, TRAIN, e)``, so a run is a pure function of its
data and config.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from drfm import rng
from drfm.errors import NumericalError
from drfm.model import (
    ModelMode,
    RandomFeatures,
    RhoSpec,
    TrainableParams,
    _check_shapes,
    init_features,
    init_params,
)
from drfm.schedule import VarianceSchedule

log = logging.getLogger(__name__)


class LossWeighting(enum.Enum):
    UNWEIGHTED = "unweighted"
    DDPM_WEIGHTED = "ddpm"

    @classmethod
    def parse(cls, value) -> "LossWeighting":
        if isinstance(value, cls):
            return value
        v = str(value).strip().lower()
        for member in cls:
            if v in (member.value, member.name.lower()):
                return member
        raise ValueError(f"unknown loss weighting {value!r}; expected unweighted or ddpm")


@dataclass
class TrainConfig:
    epochs: int = 3000
    n_features: int = 4000
    batch: int | None = None  # None trains full-batch
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    weighting: LossWeighting = LossWeighting.UNWEIGHTED
    mode: ModelMode = ModelMode.DRFM
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.mode = ModelMode.parse(self.mode)
        self.weighting = LossWeighting.parse(self.weighting)

    def validate(self) -> None:
        if int(self.epochs) < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if int(self.n_features) < 1:
            raise ValueError(f"n_features must be >= 1, got {self.n_features}")
        if self.batch is not None and int(self.batch) < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {value}")
        if not self.adam_epsilon > 0:
            raise ValueError("adam_epsilon must be positive")
        if int(self.checkpoint_every) < 0:
            raise ValueError("checkpoint_every must be >= 0")
        rng.check_seed(self.seed)


@dataclass
class GradientSet:
    g_theta1: np.ndarray
    g_theta2: np.ndarray
    g_W: np.ndarray
    g_b: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"theta1": self.g_theta1, "theta2": self.g_theta2, "W": self.g_W, "b": self.g_b}


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def example_weights(schedule: VarianceSchedule, ks, weighting: LossWeighting) -> np.ndarray:
    ks = schedule.check_timestep(ks)
    if LossWeighting.parse(weighting) is LossWeighting.UNWEIGHTED:
        return np.ones(ks.shape)
    alpha = schedule.alphas[ks - 1]
    return 1.0 / (2.0 * alpha * schedule.one_minus_alpha_bars[ks - 1])


def _check_batch(x0, ks, eps, d):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    ks = np.asarray(ks)
    if x0.ndim != 2 or x0.shape[1] != d:
        raise ValueError(f"x0 batch must have shape (B, {d}), got {x0.shape}")
    if eps.shape != x0.shape:
        raise ValueError(f"eps batch shape {eps.shape} does not match x0 {x0.shape}")
    if ks.shape != (x0.shape[0],):
        raise ValueError(f"need one timestep per row, got {ks.shape} for {x0.shape[0]} rows")
    return x0, ks, eps


def _forward(params, features, schedule, x0, ks, eps, weighting):
    _check_shapes(params, features, schedule)
    x0, ks, eps = _check_batch(x0, ks, eps, features.dim)
    ks = schedule.check_timestep(ks)
    rows = ks - 1
    x_k = schedule.forward_jump(x0, ks, eps)
    pre = x_k @ features.W + features.b
    a = np.sin(pre)
    # trig on the (K, N) table, then gather: cheaper than per-row trig when B > K
    c = np.cos(params.theta1)[rows]
    h = a * c
    out = h @ params.theta2
    resid = out - eps
    w = example_weights(schedule, ks, weighting)
    loss = float(np.mean(w * np.sum(resid * resid, axis=1)))
    return loss, (rows, x_k, pre, a, c, h, resid, w)


def loss_batch(params: TrainableParams, features: RandomFeatures, schedule: VarianceSchedule,
               x0_batch, ks, eps_batch,
               weighting: LossWeighting = LossWeighting.UNWEIGHTED) -> float:
    """Mean (optionally weighted) squared noise-prediction error over a batch."""
    loss, _ = _forward(params, features, schedule, x0_batch, ks, eps_batch, weighting)
    return loss


def loss_and_grad(params, features, schedule, x0_batch, ks, eps_batch,
                  mode: ModelMode = ModelMode.DRFM,
                  weighting: LossWeighting = LossWeighting.UNWEIGHTED) -> tuple[float, GradientSet]:
    mode = ModelMode.parse(mode)
    loss, (rows, x_k, pre, a, c, h, resid, w) = _forward(
        params, features, schedule, x0_batch, ks, eps_batch, weighting
    )
    B = resid.shape[0]
    r = (2.0 / B) * w[:, None] * resid          # dloss/dout, (B, d)
    back = r @ params.theta2.T                   # dloss/dh, (B, N)

    g_theta1 = np.zeros_like(params.theta1)
    g_theta2 = np.zeros_like(params.theta2)
    g_W = np.zeros_like(features.W)
    g_b = np.zeros_like(features.b)

    if "theta2" in mode.trainable:
        g_theta2 = h.T @ r
    if "theta1" in mode.trainable:
        per_row = -np.sin(params.theta1)[rows] * a * back
        # scatter-add into active time rows as a one-hot matmul (fixed reduction order)
        onehot = np.zeros((params.theta1.shape[0], B))
        onehot[rows, np.arange(B)] = 1.0
        g_theta1 = onehot @ per_row
    if "W" in mode.trainable:
        g_pre = np.cos(pre) * c * back
        g_b = g_pre.sum(axis=0)
        g_W = x_k.T @ g_pre
    return loss, GradientSet(g_theta1=g_theta1, g_theta2=g_theta2, g_W=g_W, g_b=g_b)


def backward(params, features, schedule, x0_batch, ks, eps_batch,
             mode: ModelMode = ModelMode.DRFM,
             weighting: LossWeighting = LossWeighting.UNWEIGHTED) -> GradientSet:
    """Exact gradients of :func:`loss_batch`; frozen tensors get zeros."""
    return loss_and_grad(params, features, schedule, x0_batch, ks, eps_batch, mode, weighting)[1]


def adam_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8, context: str = "") -> OptimizerState:
    """Bias-corrected Adam update, applied in place to ``tensors``.

    Only the names present in ``tensors`` are touched, which is how frozen
    tensors stay bit-identical.
    """
    for name in tensors:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            where = f" ({context})" if context else ""
            raise NumericalError(f"non-finite gradient for {name} at optimizer step {state.step + 1}{where}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in tensors.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + epsilon)
    return state


def _tensor_view(params: TrainableParams, features: RandomFeatures, mode: ModelMode):
    every = {"theta1": params.theta1, "theta2": params.theta2, "W": features.W, "b": features.b}
    return {name: every[name] for name in mode.trainable}


@dataclass
class TrainResult:
    checkpoint: "Checkpoint"  # noqa: F821
    losses: list[float]
    params: TrainableParams
    features: RandomFeatures


def train(dataset, config: TrainConfig, schedule: VarianceSchedule,
          rho: RhoSpec | None = None,
          on_checkpoint: Callable[[int, "Checkpoint"], None] | None = None,  # noqa: F821
          progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train a fresh model on ``dataset`` (a Dataset or an (n, d) array)."""
    from drfm.data_io import Checkpoint

    config.validate()
    x0 = np.asarray(getattr(dataset, "examples", dataset), dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] < 1:
        raise ValueError("dataset must be a non-empty (n, d) matrix")
    if not np.all(np.isfinite(x0)):
        raise ValueError("dataset contains non-finite values")
    n, d = x0.shape
    K = schedule.steps
    mode = config.mode

    features = init_features(d, config.n_features, rho, config.seed)
    params = init_params(K, config.n_features, d, mode, config.seed)
    tensors = _tensor_view(params, features, mode)
    state = OptimizerState()
    batch = n if config.batch is None else min(int(config.batch), n)

    def snapshot(epochs_done: int) -> Checkpoint:
        return Checkpoint(
            mode=mode, betas=schedule.betas.copy(), W=features.W.copy(), b=features.b.copy(),
            theta1=params.theta1.copy(), theta2=params.theta2.copy(),
            seed=config.seed, epochs=epochs_done,
        )

    losses: list[float] = []
    for epoch in range(1, int(config.epochs) + 1):
        gen = rng.stream(config.seed, rng.TRAIN, epoch)
        ks = gen.integers(1, K + 1, size=n)
        eps = gen.standard_normal((n, d))
        order = np.arange(n) if batch == n else gen.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss, grads = loss_and_grad(params, features, schedule, x0[idx], ks[idx], eps[idx],
                                        mode, config.weighting)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch offset {start}")
            adam_step(tensors, grads.as_dict(), state, config.learning_rate,
                      config.adam_beta1, config.adam_beta2, config.adam_epsilon,
                      context=f"epoch {epoch}")
            total += loss * len(idx)
        losses.append(total / n)
        if progress is not None:
            progress(epoch, losses[-1])
        if on_checkpoint is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            on_checkpoint(epoch, snapshot(epoch))

    log.debug("trained %d epochs, final loss %.6g", config.epochs, losses[-1])
    return TrainResult(checkpoint=snapshot(int(config.epochs)), losses=losses,
                       params=params, features=features)
