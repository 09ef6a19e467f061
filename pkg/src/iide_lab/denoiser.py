"""Conditional noise predictor: frozen U-Net base plus a zero-gated control branch.

The control branch is a copy of the base encoder. It sees the noisy latent
plus a hint built from the encoded image condition, the scratch mask and a
presence flag, and its time embedding carries the prompt embedding. Its
features reach the base only through 1x1 projections that start at zero,
so before fine-tuning the prediction does not depend on the condition.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import check_timestep


class VocabularyError(KeyError):
    pass


def load_vocabulary(path=None) -> tuple[str, ...]:
    """One token per line, UTF-8; line order defines embedding rows."""
    if path is None:
        text = resources.files("iide_lab").joinpath("data/vocab.txt").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    tokens = tuple(line.strip() for line in text.splitlines() if line.strip())
    if len(set(tokens)) != len(tokens):
        raise ValueError("vocabulary contains duplicate tokens")
    return tokens


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 4
    latent_size: int = 16
    widths: tuple[int, int, int] = (32, 64, 64)
    time_dim: int = 128
    text_dim: int = 32
    groups: int = 8
    T: int = 1000
    vocab: tuple[str, ...] = field(default_factory=load_vocabulary)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "vocab", tuple(self.vocab))
        if len(self.widths) != 3 or min(self.widths) <= 0:
            raise ValueError(f"widths must be three positive ints, got {self.widths}")
        if any(w % self.groups for w in self.widths):
            raise ValueError(f"widths {self.widths} must be divisible by groups={self.groups}")
        if self.latent_channels <= 0 or self.time_dim <= 0 or self.text_dim <= 0 or self.T < 1:
            raise ValueError("latent_channels, time_dim, text_dim and T must be positive")
        if self.latent_size % 4:
            raise ValueError(f"latent_size must be divisible by 4, got {self.latent_size}")
        if not self.vocab:
            raise ValueError("empty vocabulary")

    @property
    def hint_channels(self) -> int:
        # encoded condition + scratch mask + condition-present flag
        return self.latent_channels + 2


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Encoder(nn.Module):
    """Shared by the base U-Net and its control copy."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w0, w1, w2 = cfg.widths
        self.time_mlp = nn.Sequential(nn.Linear(w0, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim))
        self.conv_in = nn.Conv2d(cfg.latent_channels, w0, 3, padding=1)
        self.res0 = ResBlock(w0, w0, cfg.time_dim, cfg.groups)
        self.down0 = nn.Conv2d(w0, w0, 3, stride=2, padding=1)
        self.res1 = ResBlock(w0, w1, cfg.time_dim, cfg.groups)
        self.down1 = nn.Conv2d(w1, w1, 3, stride=2, padding=1)
        self.res2 = ResBlock(w1, w2, cfg.time_dim, cfg.groups)
        self.mid = ResBlock(w2, w2, cfg.time_dim, cfg.groups)
        self.feat_dim = w0

    def embed_time(self, t: torch.Tensor, dtype) -> torch.Tensor:
        return self.time_mlp(timestep_features(t, self.feat_dim).to(dtype))

    def forward(self, h, temb):
        """``h`` is the output of ``conv_in`` (possibly with a hint added)."""
        s0 = h
        s1 = self.res0(h, temb)
        s2 = self.res1(self.down0(s1), temb)
        s3 = self.res2(self.down1(s2), temb)
        mid = self.mid(s3, temb)
        return [s0, s1, s2, s3], mid


class UNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w0, w1, w2 = cfg.widths
        td, g = cfg.time_dim, cfg.groups
        self.encoder = Encoder(cfg)
        self.up3 = ResBlock(w2 + w2, w2, td, g)
        self.up2 = ResBlock(w2 + w1, w1, td, g)
        self.up1 = ResBlock(w1 + w0, w0, td, g)
        self.up0 = ResBlock(w0 + w0, w0, td, g)
        self.norm_out = nn.GroupNorm(g, w0)
        self.conv_out = nn.Conv2d(w0, cfg.latent_channels, 3, padding=1)

    def forward(self, z, t, residuals=None):
        temb = self.encoder.embed_time(t, z.dtype)
        skips, h = self.encoder(self.encoder.conv_in(z), temb)
        if residuals is not None:
            ctrl_skips, ctrl_mid = residuals
            skips = [s + r for s, r in zip(skips, ctrl_skips)]
            h = h + ctrl_mid
        s0, s1, s2, s3 = skips
        h = self.up3(torch.cat([h, s3], 1), temb)
        h = F.interpolate(h, scale_factor=2.0, mode="nearest")
        h = self.up2(torch.cat([h, s2], 1), temb)
        h = F.interpolate(h, scale_factor=2.0, mode="nearest")
        h = self.up1(torch.cat([h, s1], 1), temb)
        h = self.up0(torch.cat([h, s0], 1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


def _zero_conv(c: int) -> nn.Conv2d:
    conv = nn.Conv2d(c, c, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlBranch(nn.Module):
    def __init__(self, cfg: ModelConfig, base: UNet):
        super().__init__()
        w0, w1, w2 = cfg.widths
        self.encoder = copy.deepcopy(base.encoder).requires_grad_(True)
        self.hint_in = nn.Conv2d(cfg.hint_channels, w0, 3, padding=1)
        self.text_embedding = nn.Parameter(torch.randn(len(cfg.vocab), cfg.text_dim))
        self.text_proj = nn.Linear(cfg.text_dim, cfg.time_dim)
        self.zero_skips = nn.ModuleList([_zero_conv(w) for w in (w0, w0, w1, w2)])
        self.zero_mid = _zero_conv(w2)

    def projections(self) -> list[nn.Conv2d]:
        return [*self.zero_skips, self.zero_mid]

    def forward(self, z, t, hint, text):
        temb = self.encoder.embed_time(t, z.dtype) + self.text_proj(text)
        h = self.encoder.conv_in(z) + self.hint_in(hint)
        skips, mid = self.encoder(h, temb)
        return [proj(s) for proj, s in zip(self.zero_skips, skips)], self.zero_mid(mid)


class ConditionalDenoiser(nn.Module):
    """Model state: ``base`` is frozen, ``control`` holds every trainable parameter."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.base = UNet(cfg)
        self.control = ControlBranch(cfg, self.base)
        self.base.requires_grad_(False)

    def reset_control(self, seed: int | None = None) -> None:
        """Re-clone the control encoder from the current base and zero its projections."""
        seed = self.config.seed if seed is None else seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            self.control = ControlBranch(self.config, self.base).to(self.dtype)
        self.base.requires_grad_(False)

    @property
    def dtype(self):
        return self.base.conv_out.weight.dtype

    def forward(self, z, t, hint=None, text=None):
        if hint is None:
            return self.base(z, t)
        return self.base(z, t, residuals=self.control(z, t, hint, text))


def init_model(config: ModelConfig | None = None, base_state: dict | None = None) -> ConditionalDenoiser:
    """Seeded construction; ``base_state`` loads pretrained base weights before cloning the control branch."""
    config = config or ModelConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = ConditionalDenoiser(config)
    if base_state is not None:
        model.base.load_state_dict(base_state)
        model.reset_control()
    return model.eval()


def base_parameters(model: ConditionalDenoiser) -> list[nn.Parameter]:
    return list(model.base.parameters())


def trainable_parameters(model: ConditionalDenoiser) -> list[nn.Parameter]:
    """Control branch, prompt embedding table and its projection. Never base weights."""
    return list(model.control.parameters())


def parameter_hash(params: Iterable[torch.Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def count_parameters(params: Iterable[torch.Tensor]) -> int:
    return sum(p.numel() for p in params)


def tokenize(prompt: str | Sequence[str] | None) -> list[str]:
    if prompt is None:
        return []
    if isinstance(prompt, str):
        return prompt.split()
    return list(prompt)


def embed_text(model: ConditionalDenoiser, tokens: Sequence[str]) -> torch.Tensor:
    """Mean of the tokens' embedding rows; the empty prompt maps to the zero vector."""
    tokens = tokenize(tokens)
    vocab = model.config.vocab
    unknown = [tok for tok in tokens if tok not in vocab]
    if unknown:
        raise VocabularyError(f"unknown prompt tokens: {unknown}")
    if not tokens:
        return torch.zeros(model.config.text_dim, dtype=model.dtype)
    rows = torch.tensor([vocab.index(tok) for tok in tokens])
    return model.control.text_embedding[rows].mean(0)


@dataclass
class ConditionBundle:
    """Batched context: image condition (+ its latent), scratch mask, prompt embedding.

    Any field may be None. Build with :func:`make_condition`, which encodes
    the image condition through the codec.
    """

    image: torch.Tensor | None = None
    latent: torch.Tensor | None = None
    scratch_mask: torch.Tensor | None = None
    text: torch.Tensor | None = None

    def __post_init__(self):
        if self.image is not None and self.latent is None:
            raise ValueError("image condition needs its encoded latent; use make_condition")
        if self.scratch_mask is not None:
            if self.scratch_mask.ndim != 4 or self.scratch_mask.shape[1] != 1:
                raise ValueError(f"scratch mask must be (B, 1, H, W), got {tuple(self.scratch_mask.shape)}")
            if self.image is not None and self.scratch_mask.shape[-2:] != self.image.shape[-2:]:
                raise ValueError("scratch mask and image condition differ in spatial size")

    @property
    def batch_size(self) -> int | None:
        for x in (self.latent, self.scratch_mask, self.text):
            if x is not None:
                return x.shape[0]
        return None

    def latent_shape(self, model: ConditionalDenoiser) -> tuple[int, ...]:
        if self.latent is not None:
            return tuple(self.latent.shape)
        cfg = model.config
        return (self.batch_size or 1, cfg.latent_channels, cfg.latent_size, cfg.latent_size)

    def index(self, idx) -> "ConditionBundle":
        pick = lambda x: None if x is None else x[idx]
        return ConditionBundle(pick(self.image), pick(self.latent), pick(self.scratch_mask), pick(self.text))

    def hint(self, batch: int, size: tuple[int, int], channels: int, dtype) -> torch.Tensor:
        h, w = size
        if self.latent is not None:
            if tuple(self.latent.shape[-2:]) != (h, w):
                raise ValueError(f"condition latent {tuple(self.latent.shape)} does not match latent size {size}")
            lat = self.latent.to(dtype)
            flag = torch.ones(batch, 1, h, w, dtype=dtype)
        else:
            lat = torch.zeros(batch, channels, h, w, dtype=dtype)
            flag = torch.zeros(batch, 1, h, w, dtype=dtype)
        if self.scratch_mask is not None:
            mask = F.adaptive_avg_pool2d(self.scratch_mask.to(dtype), (h, w))
        else:
            mask = torch.zeros(batch, 1, h, w, dtype=dtype)
        return torch.cat([lat, mask, flag], dim=1)


def make_condition(model: ConditionalDenoiser, codec=None, image=None, scratch_mask=None,
                   prompts=None, text=None) -> ConditionBundle:
    """Assemble a :class:`ConditionBundle`.

    ``prompts`` is a list (one per batch item) of token lists or strings;
    missing prompts give the null embedding. ``text`` may be passed instead
    as precomputed embeddings.
    """
    from .codec import encode

    latent = None
    if image is not None:
        if codec is None:
            raise ValueError("an image condition requires a codec")
        if image.ndim == 3:
            image = image.unsqueeze(0)
        latent = encode(codec, image)
    if scratch_mask is not None and scratch_mask.ndim == 3:
        scratch_mask = scratch_mask.unsqueeze(0)
    if text is None and prompts is not None:
        text = torch.stack([embed_text(model, tokenize(p)) for p in prompts])
    return ConditionBundle(image=image, latent=latent, scratch_mask=scratch_mask, text=text)


def predict_noise(model: ConditionalDenoiser, zt: torch.Tensor, t, cond: ConditionBundle | None) -> torch.Tensor:
    """eps_theta(z_t, t, C). Output has the shape and dtype of ``zt``."""
    if zt.ndim != 4 or zt.shape[1] != model.config.latent_channels:
        raise ValueError(f"expected latent (B, {model.config.latent_channels}, h, w), got {tuple(zt.shape)}")
    check_timestep(t, model.config.T)
    B = zt.shape[0]
    tt = t.long().reshape(-1) if isinstance(t, torch.Tensor) else torch.full((B,), int(t), dtype=torch.long)
    if tt.numel() == 1 and B > 1:
        tt = tt.expand(B)
    dtype = model.dtype
    cond = cond or ConditionBundle()
    nb = cond.batch_size
    if nb is not None and nb != B:
        raise ValueError(f"condition batch {nb} does not match latent batch {B}")
    hint = cond.hint(B, tuple(zt.shape[-2:]), model.config.latent_channels, dtype)
    text = cond.text.to(dtype) if cond.text is not None else torch.zeros(B, model.config.text_dim, dtype=dtype)
    out = model(zt.to(dtype), tt, hint, text)
    return out.to(zt.dtype)


def predict_noise_unconditional(model: ConditionalDenoiser, zt: torch.Tensor, t) -> torch.Tensor:
    """The frozen base alone (used for prior pretraining)."""
    B = zt.shape[0]
    tt = t.long().reshape(-1) if isinstance(t, torch.Tensor) else torch.full((B,), int(t), dtype=torch.long)
    return model(zt.to(model.dtype), tt).to(zt.dtype)
