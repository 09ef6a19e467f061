"""Fine-tuning with internal image detail enhancement (IIDE).

Each training item keeps its degraded input as the image condition with
probability ``p_iide``. Otherwise the condition is replaced by the model's
own clean-image estimate ``x0~`` read off one DDIM step below the training
timestep:

    z_t    = add_noise(z0, eps, t)
    z_t-1  = ddim_step(z_t, eps_theta(z_t, t | I_lq), t, t - 1)
    z0~    = predict_z0(z_t-1, eps_theta(z_t-1, t - 1 | I_lq), t - 1)
    x0~    = decode(z0~)

``x0~`` is treated as data: no gradient flows through its derivation. The
loss is the usual noise-prediction MSE, and only the control branch is
updated.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import config_hash, encode_rng_state, load_model, save_model
from .codec import Codec, decode, encode
from .data import PairedDataset, derive_seed
from .denoiser import (ConditionalDenoiser, ConditionBundle, base_parameters, make_condition,
                       predict_noise, predict_noise_unconditional, trainable_parameters)
from .diffusion import DiffusionSchedule, ScheduleConfig, add_noise, build_schedule, ddim_step, predict_z0

logger = logging.getLogger(__name__)

ORIGINAL = "original"
INTERNAL = "internal"


@dataclass
class TrainConfig:
    p_iide: float = 0.5
    T: int = 1000
    batch_size: int = 32
    lr: float = 5e-4
    steps: int = 10000
    checkpoint_interval: int = 0
    seed: int = 0
    use_prompts: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p_iide <= 1.0:
            raise ValueError(f"p_iide must lie in [0, 1], got {self.p_iide}")
        if self.batch_size < 1 or self.steps < 0 or self.T < 1:
            raise ValueError("batch_size and T must be positive, steps non-negative")


@dataclass
class TrainBatch:
    hq: torch.Tensor  # (B, 3, H, W)
    lq: torch.Tensor  # (B, 3, H, W)
    scratch_mask: torch.Tensor  # (B, 1, H, W)
    prompts: list[list[str]]

    def __post_init__(self):
        n = {self.hq.shape[0], self.lq.shape[0], self.scratch_mask.shape[0], len(self.prompts)}
        if len(n) != 1:
            raise ValueError("batch fields disagree on batch size")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    internal_fraction: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    wall_clock: float = 0.0
    start_step: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def select_condition(rng: np.random.Generator, p_iide: float) -> str:
    """Original condition with probability ``p_iide``, else internal. One draw."""
    if not 0.0 <= p_iide <= 1.0:
        raise ValueError(f"p_iide must lie in [0, 1], got {p_iide}")
    return ORIGINAL if rng.random() < p_iide else INTERNAL


@torch.no_grad()
def derive_internal_condition(model, codec: Codec, z0: torch.Tensor, eps: torch.Tensor, t,
                              cond: ConditionBundle, sched: DiffusionSchedule, noise_fn=None) -> torch.Tensor:
    """Decoded clean-image estimate x0~ taken from z_{t-1}; shape of the clean image.

    ``noise_fn(z, t, cond)`` defaults to :func:`predict_noise`; tests swap in
    an oracle. Items with ``t < 2`` have no ``t - 1`` step and get their
    original image condition back.
    """
    noise_fn = noise_fn or (lambda z, tt, c: predict_noise(model, z, tt, c))
    t = torch.as_tensor(t).long().reshape(-1)
    if t.numel() == 1 and z0.shape[0] > 1:
        t = t.expand(z0.shape[0])
    usable = t >= 2
    t_safe = torch.where(usable, t, torch.full_like(t, 2))
    zt = add_noise(z0, eps, t_safe, sched)
    z_prev = ddim_step(zt, noise_fn(zt, t_safe, cond), t_safe, t_safe - 1, sched)
    z0_tilde = predict_z0(z_prev, noise_fn(z_prev, t_safe - 1, cond), t_safe - 1, sched)
    x0_tilde = decode(codec, z0_tilde)
    if not bool(usable.all()):
        if cond.image is None:
            raise ValueError("t < 2 needs the original image condition to fall back on")
        x0_tilde = torch.where(usable[:, None, None, None], x0_tilde, cond.image.to(x0_tilde.dtype))
    return x0_tilde


def _step_noise(config: TrainConfig, step: int, shape) -> tuple[torch.Tensor, torch.Tensor]:
    g = torch.Generator().manual_seed(derive_seed(config.seed, step, "noise"))
    t = torch.randint(1, config.T + 1, (shape[0],), generator=g)
    eps = torch.randn(tuple(shape), generator=g)
    return t, eps


def training_step(model: ConditionalDenoiser, codec: Codec, batch: TrainBatch, sched: DiffusionSchedule,
                  optimizer: torch.optim.Optimizer, config: TrainConfig, step: int) -> dict:
    """One optimiser update of the control branch. Returns loss and branch counts.

    Randomness: timesteps and noise come from a generator seeded by
    ``(seed, step, "noise")``; branch selection uses a separate stream
    ``(seed, step, "branch")``, so ``p_iide = 1`` consumes exactly the draws
    of plain conditional training.
    """
    dtype = model.dtype
    z0 = encode(codec, batch.hq).to(dtype)
    t, eps = _step_noise(config, step, z0.shape)
    eps = eps.to(dtype)
    prompts = batch.prompts if config.use_prompts else [[] for _ in batch.prompts]
    cond = make_condition(model, codec, image=batch.lq, scratch_mask=batch.scratch_mask, prompts=prompts)

    rng = np.random.default_rng(derive_seed(config.seed, step, "branch"))
    branches = [select_condition(rng, config.p_iide) for _ in range(len(prompts))]
    internal = torch.tensor([b == INTERNAL for b in branches]) & (t >= 2)
    if bool(internal.any()):
        idx = internal.nonzero().flatten()
        x_tilde = derive_internal_condition(model, codec, z0[idx], eps[idx], t[idx], cond.index(idx), sched)
        images = batch.lq.clone()
        images[idx] = x_tilde.to(images.dtype)
        cond = make_condition(model, codec, image=images, scratch_mask=batch.scratch_mask, text=cond.text)

    zt = add_noise(z0, eps, t, sched)
    loss = F.mse_loss(predict_noise(model, zt, t, cond), eps)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at step {step} (t={t.tolist()})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return {"loss": value, "n_internal": int(internal.sum()), "n": len(branches)}


def make_optimizer(model: ConditionalDenoiser, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(trainable_parameters(model), lr=config.lr)


def batch_for_step(dataset: PairedDataset, config: TrainConfig, step: int) -> TrainBatch:
    """Deterministic batch: epoch-wise permutation, fresh degradations each epoch."""
    n = len(dataset)
    per_epoch = max(n // config.batch_size, 1)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng(derive_seed(config.seed, epoch, "order")).permutation(n)
    idx = [int(perm[(pos * config.batch_size + k) % n]) for k in range(config.batch_size)]
    items = [dataset.sample(i, epoch) for i in idx]
    return TrainBatch(
        hq=torch.from_numpy(np.stack([it.hq for it in items])).float(),
        lq=torch.from_numpy(np.stack([it.lq for it in items])).float(),
        scratch_mask=torch.from_numpy(np.stack([it.scratch_mask for it in items])).float(),
        prompts=[it.tokens for it in items],
    )


def _latest_checkpoint(directory: Path) -> Path | None:
    found = sorted(directory.glob("step_*"))
    return found[-1] if found else None


def fit(model: ConditionalDenoiser, codec: Codec, dataset: PairedDataset, config: TrainConfig,
        checkpoint_dir=None, resume: bool = False, log_every: int = 0,
        sched: DiffusionSchedule | None = None) -> tuple[ConditionalDenoiser, TrainReport]:
    """Run ``config.steps`` training steps; deterministic per seed.

    With ``checkpoint_interval > 0`` a checkpoint is written every that many
    steps to ``checkpoint_dir/step_XXXXXX``; ``resume`` continues from the
    latest one (weights and optimiser moments).
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if model.config.T != config.T:
        raise ValueError(f"model T={model.config.T} differs from training T={config.T}")
    sched = sched or build_schedule(ScheduleConfig(T=config.T))
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    report = TrainReport()
    optimizer = make_optimizer(model, config)
    start = 0
    if resume and ckdir is not None and (latest := _latest_checkpoint(ckdir)) is not None:
        model, meta, optim = load_model(latest, with_optimizer_state=True)
        optimizer = make_optimizer(model, config)
        state = {"state": {i: {k: (v.reshape(()) if k == "step" else v) for k, v in s.items()}
                           for i, s in optim.items()},
                 "param_groups": meta["optimizer"]["param_groups"]}
        optimizer.load_state_dict(state)
        start = int(meta["step"])
        report.start_step = start
        logger.info("resumed from %s at step %d", latest, start)
    base_hash_before = [p.clone() for p in base_parameters(model)]
    model.train()
    t0 = time.perf_counter()
    for step in range(start, config.steps):
        out = training_step(model, codec, batch_for_step(dataset, config, step), sched, optimizer, config, step)
        report.losses.append(out["loss"])
        report.internal_fraction.append(out["n_internal"] / out["n"])
        if log_every and (step % log_every == 0 or step == config.steps - 1):
            recent = report.losses[-log_every:]
            logger.info("step %d loss %.4f (mean of last %d: %.4f)", step, out["loss"], len(recent), np.mean(recent))
        done = step + 1
        if ckdir is not None and config.checkpoint_interval and done % config.checkpoint_interval == 0:
            path = save_model(ckdir / f"step_{done:06d}", model, _train_meta(config, done), optimizer, codec)
            report.checkpoints.append(str(path))
    model.eval()
    report.wall_clock = time.perf_counter() - t0
    assert all(torch.equal(a, b) for a, b in zip(base_hash_before, base_parameters(model))), "base weights changed"
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
        (ckdir / "train_report.json").write_text(report.to_json(), encoding="utf-8")
    return model, report


def _train_meta(config: TrainConfig, step: int) -> dict:
    return {"step": step, "train_config": asdict(config), "config_hash": config_hash(config),
            "rng": {"scheme": "per-step derived seeds", "torch": encode_rng_state(
                torch.Generator().manual_seed(derive_seed(config.seed, step, "noise")).get_state())}}


@dataclass
class PretrainConfig:
    steps: int = 4000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    T: int = 1000


def pretrain_base(model: ConditionalDenoiser, codec: Codec, images: torch.Tensor, config: PretrainConfig,
                  log_every: int = 0) -> list[float]:
    """Train the base U-Net as an unconditional prior on clean images, then freeze it.

    Stands in for the large pretrained generator that fine-tuning starts
    from. Afterwards the control branch is re-cloned from the trained base
    with zeroed projections.
    """
    if len(images) == 0:
        raise ValueError("cannot pretrain on an empty image set")
    sched = build_schedule(ScheduleConfig(T=config.T))
    with torch.no_grad():
        latents = torch.cat([encode(codec, images[i:i + 256]) for i in range(0, len(images), 256)]).to(model.dtype)
    params = base_parameters(model)
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=config.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.steps, 1))
    losses = []
    model.train()
    for step in range(config.steps):
        rng = np.random.default_rng(derive_seed(config.seed, step, "pretrain"))
        z0 = latents[torch.from_numpy(rng.integers(0, len(latents), config.batch_size))]
        g = torch.Generator().manual_seed(derive_seed(config.seed, step, "pretrain-noise"))
        t = torch.randint(1, config.T + 1, (z0.shape[0],), generator=g)
        eps = torch.randn(z0.shape, generator=g, dtype=z0.dtype)
        loss = F.mse_loss(predict_noise_unconditional(model, add_noise(z0, eps, t, sched), t), eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        lr_sched.step()
        losses.append(float(loss.detach()))
        if log_every and step % log_every == 0:
            logger.info("pretrain step %d loss %.4f", step, losses[-1])
    for p in params:
        p.requires_grad_(False)
        p.grad = None
    model.eval()
    model.reset_control()
    return losses
