"""Restoration: condition on the degraded input, sample with DDIM, blend, decode."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .codec import Codec, decode, encode
from .denoiser import ConditionalDenoiser, make_condition, tokenize
from .diffusion import DiffusionSchedule, ScheduleConfig, build_schedule, sample, timestep_plan


@dataclass
class RestoreRequest:
    image: torch.Tensor  # (3, H, W) in [0, 1]
    scratch_mask: torch.Tensor | None = None  # (1, H, W) binary
    prompt: Sequence[str] | str | None = None
    n_steps: int = 50
    fidelity_weight: float = 1.0
    seed: int = 0


def fidelity_blend(z_sampled: torch.Tensor, z_cond: torch.Tensor, w: float) -> torch.Tensor:
    """Convex latent blend ``w * z_sampled + (1 - w) * z_cond``.

    ``w = 1`` keeps the generated latent, ``w = 0`` keeps the encoded input.
    """
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"fidelity weight must lie in [0, 1], got {w}")
    if z_sampled.shape != z_cond.shape:
        raise ValueError(f"shape mismatch: {tuple(z_sampled.shape)} vs {tuple(z_cond.shape)}")
    z_sampled = z_sampled.to(z_cond.dtype)
    return w * z_sampled + (1.0 - w) * z_cond


def default_schedule(model: ConditionalDenoiser) -> DiffusionSchedule:
    return build_schedule(ScheduleConfig(T=model.config.T))


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    return x.float()


def restore_batch(
    model: ConditionalDenoiser,
    codec: Codec,
    images: torch.Tensor,
    scratch_masks: torch.Tensor | None = None,
    prompts: Sequence | None = None,
    n_steps: int = 50,
    fidelity_weight: float = 1.0,
    seeds: Sequence[int] | int = 0,
    sched: DiffusionSchedule | None = None,
) -> torch.Tensor:
    """Restore a batch (B, 3, H, W). Each item's noise comes from its own seed."""
    images = _as_tensor(images)
    B = images.shape[0]
    if isinstance(seeds, (int, np.integer)):
        seeds = [int(seeds) + i for i in range(B)]
    if not 0.0 <= fidelity_weight <= 1.0:
        raise ValueError(f"fidelity weight must lie in [0, 1], got {fidelity_weight}")
    if scratch_masks is not None:
        scratch_masks = _as_tensor(scratch_masks)
    prompts = [tokenize(p) for p in prompts] if prompts is not None else [[] for _ in range(B)]
    if len(prompts) != B:
        raise ValueError(f"got {len(prompts)} prompts for {B} images")
    sched = sched or default_schedule(model)
    cond = make_condition(model, codec, image=images, scratch_mask=scratch_masks, prompts=prompts)
    z_cond = cond.latent
    if fidelity_weight == 0.0:
        return decode(codec, z_cond)
    plan = timestep_plan(sched.T, n_steps)
    z_sampled = sample(model, cond, plan, sched, seed=list(seeds), shape=tuple(z_cond.shape))
    return decode(codec, fidelity_blend(z_sampled, z_cond, fidelity_weight))


def restore(model: ConditionalDenoiser, codec: Codec, req: RestoreRequest,
            sched: DiffusionSchedule | None = None) -> torch.Tensor:
    """Restored image I_re of shape (3, H, W); deterministic per request."""
    image = _as_tensor(req.image)
    if image.ndim != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(image.shape)}")
    mask = None if req.scratch_mask is None else _as_tensor(req.scratch_mask)[None]
    out = restore_batch(model, codec, image[None], mask, [tokenize(req.prompt)], req.n_steps,
                        req.fidelity_weight, [req.seed], sched)
    return out[0]
