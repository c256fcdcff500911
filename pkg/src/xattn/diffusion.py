"""Noise schedule, forward noising, training objective, samplers.

Time steps are 1-based: ``t`` in ``[1, T]`` with ``alpha_bar(0) == 1`` for the
clean end. The denoiser itself is indexed ``t - 1``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import denoiser as dn
from .engine import Tensor, backward, no_grad, reshape

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    step_count: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal retention at step ``t`` (1-based, 0 -> 1.0)."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.step_count:
            raise ValueError(f"time step {t} outside [1, {self.step_count}]")
        return float(self.alpha_bars[t - 1])

    def alpha(self, t: int) -> float:
        if not 1 <= t <= self.step_count:
            raise ValueError(f"time step {t} outside [1, {self.step_count}]")
        return float(self.alphas[t - 1])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  shape: str = "linear") -> NoiseSchedule:
    if shape != "linear":
        raise ValueError(f"unsupported schedule shape {shape!r}")
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas), beta_start, beta_end)


def q_sample(z_0, t, epsilon, schedule: NoiseSchedule):
    """``sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps``; ``t`` may be per batch item."""
    z0 = z_0.data if isinstance(z_0, Tensor) else np.asarray(z_0)
    eps = epsilon.data if isinstance(epsilon, Tensor) else np.asarray(epsilon)
    if z0.shape != eps.shape:
        raise ValueError(f"z_0 shape {z0.shape} differs from epsilon shape {eps.shape}")
    t_arr = np.asarray(t, dtype=np.int64)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.step_count):
        raise ValueError(f"time step {t} outside [1, {schedule.step_count}]")
    ab = schedule.alpha_bars[t_arr - 1]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (z0.ndim - ab.ndim))
    out = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    return out.astype(z0.dtype, copy=False)


def delta_t(schedule: NoiseSchedule, t: int, cumulative: bool = True) -> float:
    """Guidance coefficient ``sqrt((1 - a) / a)``.

    ``a`` is the cumulative ``alpha_bar_t`` by default; ``cumulative=False``
    uses the per-step ``alpha_t`` instead.
    """
    a = schedule.alpha_bar(t) if cumulative else schedule.alpha(t)
    if a <= 0.0:
        raise ValueError("alpha is zero; delta_t undefined")
    return math.sqrt((1.0 - a) / a)


# ---------------------------------------------------------------- training
@dataclass
class TrainBatch:
    z_0: np.ndarray          # b x f x c x h x w
    token_ids: list[list[int]]
    t: np.ndarray            # b, 1-based
    epsilon: np.ndarray      # b x f x c x h x w


def make_batch(latents: np.ndarray, token_ids: Sequence[Sequence[int]], idx: np.ndarray,
               schedule: NoiseSchedule, rng: np.random.Generator) -> TrainBatch:
    z0 = latents[idx]
    t = rng.integers(1, schedule.step_count + 1, size=len(idx))
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    return TrainBatch(z0, [list(token_ids[i]) for i in idx], t, eps)


def predict_noise(params, batch: TrainBatch, schedule: NoiseSchedule, config) -> Tensor:
    z_t = q_sample(batch.z_0, batch.t, batch.epsilon, schedule)
    cond = dn.embed_prompt(params, batch.token_ids, config)
    eps_pred, _ = dn.forward(params, Tensor(z_t), batch.t - 1, cond, config)
    return eps_pred


def loss_from_prediction(eps_pred: Tensor, epsilon: np.ndarray) -> Tensor:
    """Mean over the batch of the squared L2 norm of the residual."""
    diff = eps_pred - Tensor(epsilon.astype(eps_pred.dtype, copy=False))
    sq = diff * diff
    b = sq.shape[0]
    return reshape(sq, (b, -1)).sum(axes=1).mean()


def training_loss(params, batch: TrainBatch, schedule: NoiseSchedule, config) -> Tensor:
    return loss_from_prediction(predict_noise(params, batch, schedule, config), batch.epsilon)


@dataclass
class OptimizerConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    warmup: int = 100
    grad_clip: float = 1.0
    decay: str = "none"      # "none" or "cosine" (to 10% of lr at the last step)

    def lr_at(self, step: int, total: int | None) -> float:
        lr = self.lr * min(1.0, step / self.warmup) if self.warmup else self.lr
        if self.decay == "cosine" and total and step > self.warmup:
            frac = (step - self.warmup) / max(1, total - self.warmup)
            lr *= 0.1 + 0.45 * (1.0 + math.cos(math.pi * min(1.0, frac)))
        elif self.decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr decay {self.decay!r}")
        return lr


class Adam:
    """Adaptive moment estimation over a dict of parameter tensors."""

    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig, total_steps: int | None = None):
        self.params = params
        self.cfg = cfg
        self.total_steps = total_steps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.step_count = 0

    def step(self) -> float:
        cfg = self.cfg
        self.step_count += 1
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        clip = cfg.grad_clip / norm if cfg.grad_clip and norm > cfg.grad_clip else 1.0
        lr = cfg.lr_at(self.step_count, self.total_steps)
        bc1 = 1.0 - cfg.beta1 ** self.step_count
        bc2 = 1.0 - cfg.beta2 ** self.step_count
        for k, g in grads.items():
            g = g * clip
            m, v = self.m[k], self.v[k]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p = self.params[k]
            p.data = (p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(p.data.dtype)
        return norm


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, params, loss_log):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.params = params
        self.loss_log = loss_log


def _copy(params):
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def train(params, latents: np.ndarray, token_ids: Sequence[Sequence[int]],
          optimizer_config: OptimizerConfig, steps: int, seed: int, schedule: NoiseSchedule,
          config, callback: Callable[[int, float, dict], None] | None = None):
    """Optimise the noise-prediction objective; returns ``(params, loss_log)``.

    ``latents`` holds the clean clips (n x f x c x h x w). The returned params
    are a fresh copy; the input dict is left untouched. ``callback`` receives
    ``(step, loss, params)`` after every optimiser step.
    """
    if len(latents) == 0:
        raise ValueError("dataset is empty")
    params = _copy(params)
    if steps == 0:
        return params, []
    rng = np.random.default_rng(seed)
    opt = Adam(params, optimizer_config, steps)
    loss_log: list[tuple[int, float]] = []
    last_good = _copy(params)
    n = len(latents)
    for step in range(1, steps + 1):
        idx = rng.choice(n, size=min(optimizer_config.batch_size, n), replace=False)
        batch = make_batch(latents, token_ids, idx, schedule, rng)
        loss = training_loss(params, batch, schedule, config)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, last_good, loss_log)
        backward(loss)
        opt.step()
        loss_log.append((step, value))
        if step % 50 == 0:
            last_good = _copy(params)
        if callback is not None:
            callback(step, value, params)
    return params, loss_log


# ---------------------------------------------------------------- sampling
def timestep_grid(schedule: NoiseSchedule, n: int) -> list[tuple[int, int]]:
    """``n`` (t, t_prev) pairs from ``T`` down to 0."""
    if not 1 <= n <= schedule.step_count:
        raise ValueError(f"step count {n} outside [1, {schedule.step_count}]")
    pts = np.round(np.linspace(schedule.step_count, 0, n + 1)).astype(int)
    return [(int(a), int(b)) for a, b in zip(pts[:-1], pts[1:])]


def ddim_update(z_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update (eta = 0)."""
    ab_t = schedule.alpha_bar(t)
    ab_p = schedule.alpha_bar(t_prev)
    z0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    out = math.sqrt(ab_p) * z0_hat + math.sqrt(1.0 - ab_p) * eps
    return out.astype(z_t.dtype, copy=False)


def ddpm_update(z_t: np.ndarray, eps: np.ndarray, t: int, schedule: NoiseSchedule,
                rng: np.random.Generator | None) -> np.ndarray:
    """Ancestral update ``t -> t-1`` with variance beta_t; no noise at ``t == 1``."""
    beta = float(schedule.betas[t - 1])
    alpha = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    mean = (z_t - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
    if t > 1:
        if rng is None:
            raise ValueError("ddpm step needs a random generator for t > 1")
        mean = mean + math.sqrt(beta) * rng.standard_normal(z_t.shape)
    return mean.astype(z_t.dtype, copy=False)


def predict(params, z_t: np.ndarray, t: int, condition: Tensor, config) -> np.ndarray:
    with no_grad():
        eps, _ = dn.forward(params, Tensor(z_t), t - 1, condition, config)
    return eps.data


def ddim_step(params, z_t: np.ndarray, t: int, t_prev: int, condition: Tensor,
              schedule: NoiseSchedule, config) -> np.ndarray:
    return ddim_update(z_t, predict(params, z_t, t, condition, config), t, t_prev, schedule)


def ddpm_step(params, z_t: np.ndarray, t: int, condition: Tensor, schedule: NoiseSchedule,
              config, rng: np.random.Generator | None = None) -> np.ndarray:
    return ddpm_update(z_t, predict(params, z_t, t, condition, config), t, schedule, rng)


def initial_latent(config, seed: int, batch: int | None = None) -> np.ndarray:
    shape = (config.frames, config.channels, config.height, config.width)
    if batch is not None:
        shape = (batch,) + shape
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def sample(params, token_ids, schedule: NoiseSchedule, config, n_steps: int = 50,
           seed: int = 0, z_T: np.ndarray | None = None) -> np.ndarray:
    """Plain DDIM sampling; returns the final latent."""
    z = initial_latent(config, seed) if z_T is None else np.array(z_T, copy=True)
    cond = dn.embed_prompt(params, token_ids, config)
    for t, t_prev in timestep_grid(schedule, n_steps):
        z = ddim_step(params, z, t, t_prev, cond, schedule, config)
    return z
