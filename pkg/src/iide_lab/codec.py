"""Image <-> latent autoencoder.

Images in ``[0, 1]`` are mapped affinely to ``[-1, 1]`` before encoding.
With ``downscale_factor == 1`` the codec is the identity on that range, so
``decode(encode(x)) == x`` exactly. Otherwise a small convolutional
encoder/decoder is trained on pixel MSE; encoder outputs are divided by a
latent scale measured on the training data so latents are roughly unit
variance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CodecConfig:
    downscale_factor: int = 2
    latent_channels: int = 4
    hidden: tuple[int, ...] = (32, 64)
    image_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.downscale_factor not in (1, 2, 4):
            raise ValueError(f"downscale_factor must be 1, 2 or 4, got {self.downscale_factor}")
        if self.downscale_factor == 1 and self.latent_channels != self.image_channels:
            raise ValueError("identity codec requires latent_channels == image_channels")
        if self.downscale_factor > 1 and len(self.hidden) < 1:
            raise ValueError("hidden widths must be non-empty")

    @property
    def is_identity(self) -> bool:
        return self.downscale_factor == 1


@dataclass
class CodecTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0


def _n_down(factor: int) -> int:
    return int(round(math.log2(factor)))


class Codec(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        self.register_buffer("latent_scale", torch.ones(()))
        if config.is_identity:
            self.encoder = None
            self.decoder = None
            return
        h = config.hidden
        c = config.image_channels
        enc: list[nn.Module] = [nn.Conv2d(c, h[0], 3, padding=1), nn.SiLU()]
        width = h[0]
        for i in range(_n_down(config.downscale_factor)):
            nxt = h[min(i + 1, len(h) - 1)]
            enc += [nn.Conv2d(width, nxt, 4, stride=2, padding=1), nn.SiLU(),
                    nn.Conv2d(nxt, nxt, 3, padding=1), nn.SiLU()]
            width = nxt
        enc.append(nn.Conv2d(width, config.latent_channels, 3, padding=1))
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(config.latent_channels, width, 3, padding=1), nn.SiLU()]
        for i in reversed(range(_n_down(config.downscale_factor))):
            nxt = h[i]
            dec += [nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
                    nn.ConvTranspose2d(width, nxt, 4, stride=2, padding=1), nn.SiLU()]
            width = nxt
        dec.append(nn.Conv2d(width, c, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

    def _check_image(self, x: torch.Tensor) -> None:
        f = self.config.downscale_factor
        if x.ndim != 4 or x.shape[1] != self.config.image_channels:
            raise ValueError(f"expected image batch (B, {self.config.image_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(f"image dims {tuple(x.shape[-2:])} not divisible by downscale factor {f}")

    def encode_raw(self, x: torch.Tensor) -> torch.Tensor:
        y = 2.0 * x - 1.0
        return y if self.encoder is None else self.encoder(y)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        y = z if self.decoder is None else self.decoder(z)
        return (y + 1.0) / 2.0


def init_codec(config: CodecConfig, seed: int = 0) -> Codec:
    torch.manual_seed(seed)
    return Codec(config).eval()


def identity_codec(image_channels: int = 3) -> Codec:
    return Codec(CodecConfig(downscale_factor=1, latent_channels=image_channels,
                             image_channels=image_channels)).eval()


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.ndim == 3:
        return x.unsqueeze(0), True
    return x, False


@torch.no_grad()
def encode(codec: Codec, image: torch.Tensor) -> torch.Tensor:
    """(B, 3, H, W) or (3, H, W) image in [0, 1] -> latent of (C, H/f, W/f).

    The identity codec returns float64 latents; learned codecs return float32.
    """
    x, single = _as_batch(image)
    codec._check_image(x)
    if codec.config.is_identity:
        # float64 keeps the affine map exactly invertible for float32 images
        z = 2.0 * x.double() - 1.0
    else:
        z = codec.encode_raw(x) / codec.latent_scale
    return z[0] if single else z


@torch.no_grad()
def decode(codec: Codec, latent: torch.Tensor) -> torch.Tensor:
    """Latent -> image clamped to [0, 1]."""
    z, single = _as_batch(latent)
    if z.shape[1] != codec.config.latent_channels:
        raise ValueError(f"expected {codec.config.latent_channels} latent channels, got {z.shape[1]}")
    if codec.config.is_identity:
        x = ((z.double() + 1.0) / 2.0).clamp(0.0, 1.0).float()
    else:
        x = codec.decode_raw(z.float() * codec.latent_scale).clamp(0.0, 1.0)
    return x[0] if single else x


def train_codec(images: torch.Tensor, config: CodecConfig, train_config: CodecTrainConfig | None = None,
                log_every: int = 0) -> tuple[Codec, list[float]]:
    """Fit the codec on an image stack (N, 3, H, W) by pixel MSE.

    Returns the codec and its per-step loss series. The latent scale is set
    after training to the standard deviation of the training latents.
    """
    tc = train_config or CodecTrainConfig()
    if images is None or len(images) == 0:
        raise ValueError("cannot train a codec on an empty dataset")
    images = images.float()
    codec = init_codec(config, seed=tc.seed)
    if config.is_identity:
        return codec, []
    codec._check_image(images[:1])
    codec.train()
    opt = torch.optim.Adam([p for p in codec.parameters()], lr=tc.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(tc.steps, 1))
    losses: list[float] = []
    n = len(images)
    for step in range(tc.steps):
        rng = np.random.default_rng([tc.seed, step])
        idx = torch.from_numpy(rng.integers(0, n, size=min(tc.batch_size, n)))
        x = images[idx]
        recon = codec.decode_raw(codec.encode_raw(x))
        loss = F.mse_loss(recon, x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        value = float(loss.detach())
        if not math.isfinite(value):
            logger.warning("codec loss became non-finite at step %d", step)
            break
        losses.append(value)
        if log_every and step % log_every == 0:
            logger.info("codec step %d loss %.5f", step, value)
    codec.eval()
    with torch.no_grad():
        z = torch.cat([codec.encode_raw(images[i:i + 256]) for i in range(0, n, 256)])
        codec.latent_scale.fill_(float(z.std()))
    if losses and np.mean(losses[-50:]) >= np.mean(losses[:50]):
        logger.warning("codec loss did not decrease (first %.4g, last %.4g)",
                       np.mean(losses[:50]), np.mean(losses[-50:]))
    return codec, losses


def roundtrip_error(codec: Codec, images: torch.Tensor) -> float:
    """Mean per-pixel absolute error of decode(encode(x))."""
    return float((decode(codec, encode(codec, images)) - images).abs().mean())
