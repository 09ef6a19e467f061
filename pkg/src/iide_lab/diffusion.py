"""Noise schedule and DDIM algebra.

Timesteps are 1-indexed: ``t`` runs over ``1..T`` and ``alpha_bar(0) == 1``
is only used implicitly by the final denoise-to-``z0`` step.

    forward     z_t  = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps
    clean est.  z0~  = (z_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)
    DDIM (eta=0)
                z_s  = sqrt(ab_s / ab_t) z_t
                       + (sqrt(1 - ab_s) - sqrt(ab_s (1 - ab_t) / ab_t)) eps_hat

where ``ab`` is the cumulative product of ``1 - beta``. The DDIM update is
exactly ``add_noise(predict_z0(z_t, eps_hat, t), eps_hat, s)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
import torch

Timestep = Union[int, torch.Tensor]


class ScheduleError(ValueError):
    """Invalid schedule configuration or timestep index."""


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule_kind: str = "linear"

    def validate(self) -> None:
        if not isinstance(self.T, (int, np.integer)) or self.T < 1:
            raise ScheduleError(f"T must be a positive integer, got {self.T!r}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ScheduleError(
                f"need 0 < beta_start <= beta_end < 1, got "
                f"beta_start={self.beta_start}, beta_end={self.beta_end}"
            )
        if self.schedule_kind != "linear":
            raise ScheduleError(f"unsupported schedule kind {self.schedule_kind!r}")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed float64 tables; index ``t - 1`` holds the value for step ``t``."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        check_timestep(t, self.T)
        return float(self.alpha_bars[t - 1])


def build_schedule(config: ScheduleConfig) -> DiffusionSchedule:
    config.validate()
    betas = np.linspace(config.beta_start, config.beta_end, config.T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def check_timestep(t: Timestep, T: int, lo: int = 1) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() == 0:
            return
        bad = (t < lo) | (t > T)
        if bool(bad.any()):
            raise ScheduleError(f"timesteps must lie in [{lo}, {T}], got {t.tolist()}")
    elif not lo <= int(t) <= T:
        raise ScheduleError(f"timestep must lie in [{lo}, {T}], got {t}")


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _coef(sched: DiffusionSchedule, t: Timestep, like: torch.Tensor) -> torch.Tensor:
    """alpha_bar at ``t`` (0 allowed) as a tensor broadcastable against ``like``."""
    table = torch.from_numpy(np.concatenate([[1.0], sched.alpha_bars]))
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        ab = table[t.long().cpu()].to(like.dtype)
        return ab.reshape(-1, *([1] * (like.ndim - 1))).to(like.device)
    return torch.tensor(float(table[int(t)]), dtype=like.dtype, device=like.device)


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t: Timestep, sched: DiffusionSchedule) -> torch.Tensor:
    """Closed-form forward noising of ``z0`` to step ``t``."""
    check_timestep(t, sched.T)
    _check_shapes(z0, eps)
    ab = _coef(sched, t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def predict_z0(zt: torch.Tensor, eps_hat: torch.Tensor, t: Timestep, sched: DiffusionSchedule) -> torch.Tensor:
    """Clean-latent estimate from a noisy latent and a noise prediction."""
    check_timestep(t, sched.T)
    _check_shapes(zt, eps_hat)
    ab = _coef(sched, t, zt)
    return zt / ab.sqrt() - (1.0 - ab).sqrt() * eps_hat / ab.sqrt()


def ddim_step(
    zt: torch.Tensor,
    eps_hat: torch.Tensor,
    t: Timestep,
    t_prev: Timestep,
    sched: DiffusionSchedule,
) -> torch.Tensor:
    """Deterministic (eta=0) DDIM update from ``t`` to ``t_prev <= t``."""
    check_timestep(t, sched.T)
    check_timestep(t_prev, sched.T)
    if bool(torch.as_tensor(t_prev > t).any()):
        raise ScheduleError(f"t_prev must not exceed t (t={t}, t_prev={t_prev})")
    _check_shapes(zt, eps_hat)
    ab_t = _coef(sched, t, zt)
    ab_p = _coef(sched, t_prev, zt)
    scale = (ab_p / ab_t).sqrt()
    direction = (1.0 - ab_p).sqrt() - (ab_p * (1.0 - ab_t) / ab_t).sqrt()
    # t_prev == t must be an exact identity; the direction term only cancels up to rounding
    same = ab_p == ab_t
    scale = torch.where(same, torch.ones_like(scale), scale)
    direction = torch.where(same, torch.zeros_like(direction), direction)
    return scale * zt + direction * eps_hat


def timestep_plan(T: int, n_steps: int) -> list[int]:
    """Evenly spaced, strictly decreasing subsequence of ``[T, ..., 1]``.

    Entries are ``floor(T - k (T - 1) / (n_steps - 1) + 0.5)`` for
    ``k = 0..n_steps-1``; spacing is at least one so rounding half-up
    keeps the plan strictly decreasing.
    """
    if not 1 <= n_steps <= T:
        raise ScheduleError(f"n_steps must lie in [1, {T}], got {n_steps}")
    if n_steps == 1:
        return [T]
    k = np.arange(n_steps, dtype=np.float64)
    steps = np.floor(T - k * (T - 1) / (n_steps - 1) + 0.5).astype(int)
    return [int(s) for s in steps]


NoisePredictor = Callable[[torch.Tensor, int], torch.Tensor]


def initial_noise(shape: Sequence[int], seed: int | Sequence[int], dtype=torch.float32) -> torch.Tensor:
    """Seeded unit-Gaussian ``z_T``; a sequence of seeds draws one item per seed."""
    if isinstance(seed, (int, np.integer)):
        g = torch.Generator().manual_seed(int(seed))
        return torch.randn(tuple(shape), generator=g, dtype=dtype)
    seeds = list(seed)
    if len(seeds) != shape[0]:
        raise ValueError(f"got {len(seeds)} seeds for batch of {shape[0]}")
    items = [torch.randn(tuple(shape[1:]), generator=torch.Generator().manual_seed(int(s)), dtype=dtype) for s in seeds]
    return torch.stack(items)


@torch.no_grad()
def ddim_loop(
    eps_fn: NoisePredictor,
    z_T: torch.Tensor,
    plan: Sequence[int],
    sched: DiffusionSchedule,
) -> torch.Tensor:
    """Run DDIM along ``plan`` and return the clean-latent estimate at its last entry."""
    if len(plan) == 0:
        raise ScheduleError("empty timestep plan")
    if any(b >= a for a, b in zip(plan, plan[1:])):
        raise ScheduleError(f"timestep plan must be strictly decreasing: {list(plan)}")
    z = z_T
    for i, t in enumerate(plan):
        eps_hat = eps_fn(z, int(t))
        if i == len(plan) - 1:
            return predict_z0(z, eps_hat, int(t), sched)
        z = ddim_step(z, eps_hat, int(t), int(plan[i + 1]), sched)
    raise AssertionError("unreachable")


def sample(model, cond, plan: Sequence[int], sched: DiffusionSchedule, seed: int | Sequence[int],
           shape: Sequence[int] | None = None) -> torch.Tensor:
    """Deterministic DDIM sampling of a latent from seeded noise.

    ``shape`` defaults to the condition latent shape, or the model's
    configured latent shape for a single unconditional item.
    """
    from .denoiser import predict_noise

    if shape is None:
        shape = cond.latent_shape(model)
    z_T = initial_noise(shape, seed)
    return ddim_loop(lambda z, t: predict_noise(model, z, t, cond), z_T, plan, sched)
