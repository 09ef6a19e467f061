"""Full-reference fidelity metrics and the dataset evaluation harness.

SSIM uses an 11x11 Gaussian window (sigma 1.5), C1 = (0.01 peak)^2 and
C2 = (0.03 peak)^2, population statistics, and averages over windows fully
inside the image. Colour inputs are converted to Rec.601 luma first.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy import signal

PSNR_CAP = 100.0
TABLE_COLUMNS = ("PSNR", "SSIM", "LPIPS", "FID", "CLIPIQA", "MUSIQ")

CANONICAL_HUES = {"red": 0.0, "yellow": 60.0, "green": 120.0, "blue": 240.0}


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _np(a), _np(b)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak**2 / mse))


def _to_gray(x: np.ndarray) -> np.ndarray:
    if x.ndim == 3 and x.shape[0] == 3:
        return np.tensordot(np.array([0.299, 0.587, 0.114]), x, axes=1)
    if x.ndim == 3 and x.shape[0] == 1:
        return x[0]
    if x.ndim == 2:
        return x
    raise ValueError(f"expected (3, H, W), (1, H, W) or (H, W), got {x.shape}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, peak: float = 1.0, win: int = 11, sigma: float = 1.5) -> np.ndarray:
    x, y = _to_gray(_np(a)), _to_gray(_np(b))
    _same_shape(x, y)
    if min(x.shape) < win:
        raise ValueError(f"image {x.shape} smaller than the {win}x{win} SSIM window")
    k = gaussian_window(win, sigma)
    filt = lambda img: signal.correlate2d(img, k, mode="valid")
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))


def ssim(a, b, peak: float = 1.0) -> float:
    return float(ssim_map(a, b, peak).mean())


def rgb_to_hsv(image) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hue in degrees, saturation and value planes of a (3, H, W) image."""
    r, g, b = _np(image)
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    c = mx - mn
    safe = np.where(c > 0, c, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4))
    h = np.where(c > 0, 60.0 * h, 0.0)
    s = np.where(mx > 0, c / np.where(mx > 0, mx, 1.0), 0.0)
    return h, s, mx


def mean_hue(image, mask=None) -> float:
    """Chroma-weighted circular mean hue (degrees in [0, 360)) over ``mask``; NaN if achromatic."""
    r, g, b = _np(image)
    h, _, _ = rgb_to_hsv(image)
    chroma = np.maximum(np.maximum(r, g), b) - np.minimum(np.minimum(r, g), b)
    weight = chroma if mask is None else chroma * (_np(mask).reshape(chroma.shape) > 0.5)
    rad = np.deg2rad(h)
    x, y = float((weight * np.cos(rad)).sum()), float((weight * np.sin(rad)).sum())
    if math.hypot(x, y) < 1e-9:
        return float("nan")
    return math.degrees(math.atan2(y, x)) % 360.0


def hue_distance(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


@dataclass
class MetricReport:
    psnr: list[float]
    ssim: list[float]
    stems: list[str]
    input_psnr: list[float] = field(default_factory=list)
    input_ssim: list[float] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    # reserved for values computed by external tools
    external: dict = field(default_factory=lambda: {k: None for k in TABLE_COLUMNS[2:]})

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def mean_input_psnr(self) -> float:
        return float(np.mean(self.input_psnr)) if self.input_psnr else float("nan")

    @property
    def mean_input_ssim(self) -> float:
        return float(np.mean(self.input_ssim)) if self.input_ssim else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"] = {"PSNR": self.mean_psnr, "SSIM": self.mean_ssim,
                     "input_PSNR": self.mean_input_psnr, "input_SSIM": self.mean_input_ssim}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table_row(self, name: str) -> list[str]:
        vals = [f"{self.mean_psnr:.2f}", f"{self.mean_ssim:.4f}"]
        vals += ["-" if self.external.get(k) is None else f"{self.external[k]:.4g}" for k in TABLE_COLUMNS[2:]]
        return [name] + vals


def format_table(rows: Sequence[tuple[str, MetricReport]]) -> str:
    """Aligned plain-text table, columns PSNR SSIM LPIPS FID CLIPIQA MUSIQ."""
    body = [["Method", *TABLE_COLUMNS]] + [r.table_row(name) for name, r in rows]
    widths = [max(len(row[i]) for row in body) for i in range(len(body[0]))]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
             for row in body]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


@dataclass
class EvalConfig:
    n_steps: int = 50
    fidelity_weight: float = 1.0
    seed: int = 0
    batch_size: int = 64
    use_prompts: bool = True


def evaluate_dataset(model, codec, dataset, config: EvalConfig | None = None, metadata: dict | None = None) -> MetricReport:
    """Restore every pair of ``dataset`` and score it against its clean image.

    Item ``i`` always uses sampling seed ``config.seed + i``. Captions are
    used as prompts when ``config.use_prompts`` is set.
    """
    from .pipeline import restore_batch

    config = config or EvalConfig()
    items = list(dataset)
    if not items:
        raise ValueError("cannot evaluate an empty dataset")
    if codec.config.latent_channels != model.config.latent_channels:
        raise ValueError("checkpoint mismatch: codec latent channels differ from the model's")
    report = MetricReport(psnr=[], ssim=[], stems=[], metadata=dict(metadata or {}))
    for start in range(0, len(items), config.batch_size):
        chunk = items[start:start + config.batch_size]
        lq = torch.stack([torch.as_tensor(it.lq) for it in chunk]).float()
        masks = torch.stack([torch.as_tensor(it.scratch_mask) for it in chunk]).float()
        prompts = [it.tokens if config.use_prompts else [] for it in chunk]
        seeds = [config.seed + start + i for i in range(len(chunk))]
        out = restore_batch(model, codec, lq, masks, prompts, config.n_steps, config.fidelity_weight, seeds)
        for it, restored in zip(chunk, out):
            hq = np.asarray(it.hq, dtype=np.float64)
            report.stems.append(it.stem)
            report.psnr.append(psnr(restored, hq))
            report.ssim.append(ssim(restored, hq))
            report.input_psnr.append(psnr(np.asarray(it.lq, dtype=np.float64), hq))
            report.input_ssim.append(ssim(np.asarray(it.lq, dtype=np.float64), hq))
    report.metadata.setdefault("eval_config", asdict(config))
    report.metadata.setdefault("config_hash", hashlib.sha256(
        json.dumps(asdict(config), sort_keys=True).encode()).hexdigest()[:16])
    return report


def compare_reports(candidate: MetricReport, baseline: MetricReport) -> dict:
    """Per-metric mean deltas (candidate - baseline) and per-image win counts."""
    if candidate.stems != baseline.stems:
        raise ValueError("reports cover different images")
    wins = lambda a, b: int(sum(x > y for x, y in zip(a, b)))
    return {
        "PSNR_delta": candidate.mean_psnr - baseline.mean_psnr,
        "SSIM_delta": candidate.mean_ssim - baseline.mean_ssim,
        "PSNR_wins": wins(candidate.psnr, baseline.psnr),
        "SSIM_wins": wins(candidate.ssim, baseline.ssim),
        "n": len(candidate.stems),
    }
