"""Mixed degradation operator for synthesising low-quality training pairs.

Images are float arrays of shape (C, H, W) with values in [0, 1]. A
:class:`DegradationSpec` holds one parameter set per operator; operators are
always applied in the order

    color_fade -> gaussian_blur -> down_up_sample
               -> additive_gaussian_noise -> block_compression -> scratches

and every operator at its identity parameter returns its input unchanged.
Randomness (noise, scratch placement) comes from seeds stored in the DegradationSpec,
so ``apply(image, spec)`` is a pure function.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Union

import numpy as np
from PIL import Image, ImageDraw
from scipy import fft, ndimage

REC601 = np.array([0.299, 0.587, 0.114])

# JPEG luminance quantisation table, rescaled to [0, 1] intensities below.
_JPEG_Q = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

DOWN_UP_FACTORS = (1, 2, 4)


class DegradationError(ValueError):
    pass


def _check(name: str, value: float, lo: float, hi: float) -> None:
    if not (lo <= value <= hi):
        raise DegradationError(f"{name}={value} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class ColorFade:
    saturation: float = 1.0
    grayscale: bool = False

    def __post_init__(self):
        _check("saturation", self.saturation, 0.0, 1.0)

    @property
    def is_identity(self) -> bool:
        return self.saturation == 1.0 and not self.grayscale


@dataclass(frozen=True)
class GaussianBlur:
    sigma: float = 0.0

    def __post_init__(self):
        _check("blur sigma", self.sigma, 0.0, 3.0)

    @property
    def is_identity(self) -> bool:
        return self.sigma == 0.0


@dataclass(frozen=True)
class DownUpSample:
    factor: int = 1

    def __post_init__(self):
        if self.factor not in DOWN_UP_FACTORS:
            raise DegradationError(f"down_up factor must be one of {DOWN_UP_FACTORS}, got {self.factor}")

    @property
    def is_identity(self) -> bool:
        return self.factor == 1


@dataclass(frozen=True)
class AdditiveGaussianNoise:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        _check("noise sigma", self.sigma, 0.0, 0.1)

    @property
    def is_identity(self) -> bool:
        return self.sigma == 0.0


@dataclass(frozen=True)
class BlockCompression:
    quality: float = 1.0
    block: int = 8

    def __post_init__(self):
        _check("compression quality", self.quality, 0.3, 1.0)
        if self.block != 8:
            raise DegradationError("only 8x8 blocks are supported")

    @property
    def is_identity(self) -> bool:
        return self.quality == 1.0


@dataclass(frozen=True)
class Scratches:
    density: float = 0.0
    seed: int = 0

    def __post_init__(self):
        _check("scratch density", self.density, 0.0, 0.05)

    @property
    def is_identity(self) -> bool:
        return self.density == 0.0


Operator = Union[ColorFade, GaussianBlur, DownUpSample, AdditiveGaussianNoise, BlockCompression, Scratches]

OPERATOR_ORDER = (
    ("color_fade", ColorFade),
    ("gaussian_blur", GaussianBlur),
    ("down_up_sample", DownUpSample),
    ("additive_gaussian_noise", AdditiveGaussianNoise),
    ("block_compression", BlockCompression),
    ("scratches", Scratches),
)


@dataclass(frozen=True)
class DegradationSpec:
    color_fade: ColorFade = field(default_factory=ColorFade)
    gaussian_blur: GaussianBlur = field(default_factory=GaussianBlur)
    down_up_sample: DownUpSample = field(default_factory=DownUpSample)
    additive_gaussian_noise: AdditiveGaussianNoise = field(default_factory=AdditiveGaussianNoise)
    block_compression: BlockCompression = field(default_factory=BlockCompression)
    scratches: Scratches = field(default_factory=Scratches)

    def operators(self) -> list[Operator]:
        return [getattr(self, name) for name, _ in OPERATOR_ORDER]

    @property
    def is_identity(self) -> bool:
        return all(op.is_identity for op in self.operators())

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name, _ in OPERATOR_ORDER}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "DegradationSpec":
        known = dict(OPERATOR_ORDER)
        extra = set(data) - set(known)
        if extra:
            raise DegradationError(f"unknown operators: {sorted(extra)}")
        return cls(**{name: known[name](**params) for name, params in data.items()})

    @classmethod
    def from_json(cls, text: str) -> "DegradationSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class DegradedPair:
    lq: np.ndarray
    hq: np.ndarray
    scratch_mask: np.ndarray
    spec: DegradationSpec


def sample_spec(seed: int, severity: float) -> DegradationSpec:
    """Draw each parameter uniformly between its identity value and
    ``identity + severity * (extreme - identity)``.

    The down/up factor is drawn on the continuous range ``[1, 1 + 3 severity]``
    and snapped to 1 below 1.5, 2 below 3, else 4. The full-grayscale flag is
    set with probability ``severity / 2``. The number of draws is fixed, so a
    seed always maps to the same spec.
    """
    if not 0.0 <= severity <= 1.0:
        raise DegradationError(f"severity must lie in [0, 1], got {severity}")
    rng = np.random.default_rng(seed)

    def draw(identity: float, extreme: float) -> float:
        return identity + severity * (extreme - identity) * float(rng.random())

    saturation = draw(1.0, 0.0)
    grayscale = bool(rng.random() < 0.5 * severity)
    blur = draw(0.0, 3.0)
    u = draw(1.0, 4.0)
    factor = 1 if u < 1.5 else 2 if u < 3.0 else 4
    noise = draw(0.0, 0.1)
    quality = draw(1.0, 0.3)
    density = draw(0.0, 0.05)
    noise_seed, scratch_seed = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
    return DegradationSpec(
        color_fade=ColorFade(saturation=min(max(saturation, 0.0), 1.0), grayscale=grayscale),
        gaussian_blur=GaussianBlur(sigma=min(blur, 3.0)),
        down_up_sample=DownUpSample(factor=factor),
        additive_gaussian_noise=AdditiveGaussianNoise(sigma=min(noise, 0.1), seed=noise_seed),
        block_compression=BlockCompression(quality=max(quality, 0.3)),
        scratches=Scratches(density=min(density, 0.05), seed=scratch_seed),
    )


def luminance(image: np.ndarray) -> np.ndarray:
    """Rec.601 luma of a (3, H, W) image, shape (H, W)."""
    return np.tensordot(REC601, image.astype(np.float64), axes=1)


def _color_fade(img: np.ndarray, op: ColorFade) -> np.ndarray:
    if img.shape[0] != 3:
        return img
    lum = luminance(img)[None]
    s = 0.0 if op.grayscale else op.saturation
    return lum + s * (img - lum)


def _blur(img: np.ndarray, op: GaussianBlur) -> np.ndarray:
    return ndimage.gaussian_filter(img, sigma=(0.0, op.sigma, op.sigma), mode="reflect")


def _down_up(img: np.ndarray, op: DownUpSample) -> np.ndarray:
    f = op.factor
    c, h, w = img.shape
    if h % f or w % f:
        raise DegradationError(f"image dims {(h, w)} not divisible by down/up factor {f}")
    small = img.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))
    return ndimage.zoom(small, (1, f, f), order=1, mode="nearest", grid_mode=True)


def _noise(img: np.ndarray, op: AdditiveGaussianNoise) -> np.ndarray:
    rng = np.random.default_rng(op.seed)
    return img + op.sigma * rng.standard_normal(img.shape)


def _compress(img: np.ndarray, op: BlockCompression) -> np.ndarray:
    b = op.block
    c, h, w = img.shape
    ph, pw = (-h) % b, (-w) % b
    padded = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    H, W = padded.shape[1:]
    blocks = padded.reshape(c, H // b, b, W // b, b).transpose(0, 1, 3, 2, 4)
    coef = fft.dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    # quality 0.3 -> 3x the JPEG table; quality 1 -> no quantisation
    step = _JPEG_Q / 255.0 * 3.0 * (1.0 - op.quality) / 0.7
    coef = np.round(coef / step) * step
    out = fft.idctn(coef, type=2, norm="ortho", axes=(-2, -1))
    out = out.transpose(0, 1, 3, 2, 4).reshape(c, H, W)
    return out[:, :h, :w]


def synthesize_scratches(seed: int, dims: tuple[int, int], density: float) -> tuple[np.ndarray, np.ndarray]:
    """Random polyline scratches until the covered pixel fraction reaches ``density``.

    Returns a binary float mask (H, W) and an overlay (H, W) holding each
    scratch's near-white intensity (0.9-1.0) on masked pixels, 0 elsewhere.
    Lines are 1-3 px wide and mostly vertical, like emulsion damage.
    """
    _check("scratch density", density, 0.0, 0.05)
    h, w = dims
    mask = np.zeros((h, w), dtype=np.float64)
    overlay = np.zeros((h, w), dtype=np.float64)
    if density == 0.0:
        return mask, overlay
    rng = np.random.default_rng(seed)
    for _ in range(200):
        canvas = Image.new("L", (w, h), 0)
        draw = ImageDraw.Draw(canvas)
        x, y = rng.uniform(0, w), rng.uniform(0, h)
        angle = np.pi / 2 + rng.normal(0.0, 0.5)
        pts = [(x, y)]
        for _seg in range(int(rng.integers(1, 4))):
            length = rng.uniform(0.15, 0.5) * h
            angle += rng.normal(0.0, 0.3)
            x, y = x + length * np.cos(angle), y + length * np.sin(angle)
            pts.append((x, y))
        width = int(rng.integers(1, 4))
        draw.line(pts, fill=255, width=width, joint="curve")
        hit = np.asarray(canvas) > 0
        overlay[hit] = rng.uniform(0.9, 1.0)
        mask[hit] = 1.0
        if mask.mean() >= density:
            break
    return mask, overlay


_APPLY = {
    ColorFade: _color_fade,
    GaussianBlur: _blur,
    DownUpSample: _down_up,
    AdditiveGaussianNoise: _noise,
    BlockCompression: _compress,
}


def apply_operator(image: np.ndarray, op: Operator) -> np.ndarray:
    """Apply a single operator; the identity parameter returns ``image`` itself."""
    if op.is_identity:
        return image
    if isinstance(op, Scratches):
        mask, overlay = synthesize_scratches(op.seed, image.shape[-2:], op.density)
        out = np.where(mask[None] > 0, overlay[None], image)
    else:
        out = _APPLY[type(op)](image.astype(np.float64), op)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def apply(image: np.ndarray, spec: DegradationSpec) -> DegradedPair:
    """Degrade ``image`` with every operator of ``spec`` in the fixed order."""
    if image.ndim != 3:
        raise DegradationError(f"expected a (C, H, W) image, got shape {image.shape}")
    lq = image
    mask = np.zeros(image.shape[-2:], dtype=image.dtype)
    for op in spec.operators():
        if isinstance(op, Scratches) and not op.is_identity:
            m, overlay = synthesize_scratches(op.seed, image.shape[-2:], op.density)
            lq = np.where(m[None] > 0, overlay[None], lq).astype(image.dtype)
            mask = m.astype(image.dtype)
        else:
            lq = apply_operator(lq, op)
    return DegradedPair(lq=lq, hq=image, scratch_mask=mask, spec=spec)
