"""Toy shapes corpus, degraded-pair datasets and PNG I/O.

A dataset directory holds, per item ``<stem>``:

    <stem>_hq.png      clean image
    <stem>.txt         caption, e.g. "red circle"
    <stem>_obj.png     object-region mask
    <stem>_lq.png      degraded image          (paired datasets only)
    <stem>_scratch.png scratch mask            (paired datasets only)
    <stem>_spec.json   degradation parameters  (paired datasets only)

plus ``manifest.json`` listing the stems in iteration order.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .degradation import DegradationSpec, apply, sample_spec
from .denoiser import load_vocabulary

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1

COLOR_HUES = {"red": 0.0, "yellow": 60.0, "green": 120.0, "blue": 240.0}


class DatasetError(ValueError):
    pass


class PairingError(DatasetError):
    pass


def derive_seed(*parts) -> int:
    """Stable 31-bit seed from arbitrary parts, e.g. (global seed, stem, epoch)."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**31 - 1)


def cache_dir() -> Path:
    """Root for intermediate artifacts; ``IIDE_LAB_CACHE`` relocates it."""
    return Path(os.environ.get("IIDE_LAB_CACHE", Path.home() / ".cache" / "iide_lab"))


def read_png(path) -> np.ndarray:
    """PNG -> float32 (C, H, W) in [0, 1]; grayscale files give C = 1."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L") if im.mode in ("L", "1", "I", "I;16") else im.convert("RGB"))
    arr = arr.astype(np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1).copy()


def write_png(path, image) -> None:
    """(C, H, W) in [0, 1] -> 8-bit PNG, rounded to nearest."""
    arr = np.asarray(image, dtype=np.float64)
    arr = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[0] == 1:
        img = Image.fromarray(arr[0], mode="L")
    elif arr.ndim == 3 and arr.shape[0] == 3:
        img = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    elif arr.ndim == 2:
        img = Image.fromarray(arr, mode="L")
    else:
        raise ValueError(f"cannot write image of shape {arr.shape}")
    img.save(path, format="PNG", optimize=False)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits, as writing and reading a PNG would."""
    return (np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255) / 255.0).astype(np.float32)


@dataclass
class ShapesDatasetConfig:
    n_images: int = 100
    size: int = 32
    shapes: tuple[str, ...] = ("circle", "square", "triangle")
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow", "white")
    texture_amplitude: float = 0.08
    seed: int = 0

    def validate(self, vocab: Sequence[str] | None = None) -> None:
        vocab = load_vocabulary() if vocab is None else vocab
        if self.n_images < 1:
            raise DatasetError("n_images must be at least 1")
        if self.size < 16 or self.size % 8:
            raise DatasetError("image size must be a multiple of 8, at least 16")
        missing = [w for w in (*self.shapes, *self.colors) if w not in vocab]
        if missing:
            raise DatasetError(f"shape/color words not in the vocabulary: {missing}")
        unknown = [c for c in self.colors if c not in COLOR_HUES and c != "white"]
        if unknown:
            raise DatasetError(f"no rendering rule for colors {unknown}")


def _object_color(name: str, rng: np.random.Generator) -> np.ndarray:
    if name == "white":
        return np.full(3, rng.uniform(0.8, 1.0))
    hue = (COLOR_HUES[name] + rng.uniform(-8.0, 8.0)) % 360.0
    return np.array(colorsys.hsv_to_rgb(hue / 360.0, rng.uniform(0.75, 1.0), rng.uniform(0.6, 1.0)))


def _object_mask(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    ss = 4  # supersampling for anti-aliased edges
    r = rng.uniform(0.2, 0.34) * size
    cx, cy = rng.uniform(r + 1, size - r - 1, size=2)
    canvas = Image.new("L", (size * ss, size * ss), 0)
    draw = ImageDraw.Draw(canvas)
    if shape == "circle":
        draw.ellipse([(cx - r) * ss, (cy - r) * ss, (cx + r) * ss, (cy + r) * ss], fill=255)
    elif shape == "square":
        a = r * 0.9
        draw.rectangle([(cx - a) * ss, (cy - a) * ss, (cx + a) * ss, (cy + a) * ss], fill=255)
    elif shape == "triangle":
        rot = rng.uniform(-0.3, 0.3)
        angles = rot + np.pi / 2 + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
        pts = [((cx + r * 1.15 * np.cos(a)) * ss, (cy - r * 1.15 * np.sin(a)) * ss) for a in angles]
        draw.polygon(pts, fill=255)
    else:
        raise DatasetError(f"unknown shape {shape!r}")
    m = np.asarray(canvas, dtype=np.float64) / 255.0
    return m.reshape(size, ss, size, ss).mean(axis=(1, 3))


def render_shape_image(config: ShapesDatasetConfig, seed: int) -> tuple[np.ndarray, np.ndarray, str]:
    """One (3, S, S) image, its soft object mask (1, S, S) and caption."""
    rng = np.random.default_rng(seed)
    s = config.size
    color = config.colors[int(rng.integers(len(config.colors)))]
    shape = config.shapes[int(rng.integers(len(config.shapes)))]
    gray = rng.uniform(0.15, 0.45)
    tint = rng.uniform(-0.03, 0.03, size=3)
    texture = ndimage.gaussian_filter(rng.standard_normal((s, s)), 2.0)
    texture *= config.texture_amplitude / max(texture.std(), 1e-8)
    background = np.clip(gray + tint[:, None, None] + texture[None], 0.0, 1.0)
    mask = _object_mask(shape, s, rng)
    rgb = _object_color(color, rng)
    shading = 1.0 + 0.5 * config.texture_amplitude * ndimage.gaussian_filter(rng.standard_normal((s, s)), 1.5)
    obj = np.clip(rgb[:, None, None] * shading[None], 0.0, 1.0)
    image = background * (1.0 - mask[None]) + obj * mask[None]
    return quantize(image), quantize(mask[None]), f"{color} {shape}"


def _write_manifest(out: Path, entries: list[dict], extra: dict) -> None:
    doc = {"version": MANIFEST_VERSION, "entries": entries, **extra}
    (out / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def generate_shapes_dataset(config: ShapesDatasetConfig, out_dir) -> Path:
    """Write the shapes corpus; identical config and seed give byte-identical files."""
    config.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {out}: {exc}") from exc
    entries = []
    for i in range(config.n_images):
        stem = f"{i:05d}"
        image, mask, caption = render_shape_image(config, derive_seed(config.seed, stem))
        write_png(out / f"{stem}_hq.png", image)
        write_png(out / f"{stem}_obj.png", mask)
        (out / f"{stem}.txt").write_text(caption + "\n", encoding="utf-8")
        entries.append({"stem": stem, "caption": caption})
    cfg = asdict(config)
    cfg["shapes"], cfg["colors"] = list(config.shapes), list(config.colors)
    _write_manifest(out, entries, {"kind": "shapes", "config": cfg})
    return out


@dataclass
class Sample:
    stem: str
    hq: np.ndarray
    lq: np.ndarray
    scratch_mask: np.ndarray
    tokens: list[str]
    object_mask: np.ndarray | None = None
    spec: DegradationSpec | None = None


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise DatasetError(f"no {MANIFEST} in {directory}")
    return json.loads(path.read_text(encoding="utf-8"))


class PairedDataset:
    """Clean images with degraded counterparts, iterated in manifest order.

    In ``paired`` mode the ``<stem>_lq.png`` files are used as-is. In
    ``on_the_fly`` mode each clean image is degraded with a seed derived from
    ``(seed, stem, epoch)``; iterating uses epoch 0, and :meth:`sample` lets
    a trainer draw fresh degradations per epoch.
    """

    def __init__(self, directory, mode: str = "paired", seed: int = 0, severity: float = 0.7):
        if mode not in ("paired", "on_the_fly"):
            raise DatasetError(f"unknown mode {mode!r}")
        self.directory = Path(directory)
        self.mode, self.seed, self.severity = mode, seed, severity
        self.manifest = read_manifest(self.directory)
        self.stems = [e["stem"] for e in self.manifest["entries"]]
        self.captions = [e["caption"] for e in self.manifest["entries"]]
        self.hq = np.stack([read_png(self.directory / f"{s}_hq.png") for s in self.stems])
        obj = [self.directory / f"{s}_obj.png" for s in self.stems]
        self.object_masks = np.stack([read_png(p) for p in obj]) if all(p.exists() for p in obj) else None
        self.lq = self.scratch = None
        if mode == "paired":
            for s in self.stems:
                if not (self.directory / f"{s}_lq.png").exists():
                    raise PairingError(f"missing low-quality counterpart for stem {s!r}")
            self.lq = np.stack([read_png(self.directory / f"{s}_lq.png") for s in self.stems])
            self.scratch = np.stack([
                read_png(self.directory / f"{s}_scratch.png") if (self.directory / f"{s}_scratch.png").exists()
                else np.zeros((1, *self.hq.shape[-2:]), np.float32) for s in self.stems])

    def __len__(self) -> int:
        return len(self.stems)

    def degrade(self, i: int, epoch: int = 0) -> tuple[np.ndarray, np.ndarray, DegradationSpec]:
        spec = sample_spec(derive_seed(self.seed, self.stems[i], epoch), self.severity)
        pair = apply(self.hq[i], spec)
        return quantize(pair.lq), pair.scratch_mask[None].astype(np.float32), spec

    def sample(self, i: int, epoch: int = 0) -> Sample:
        if self.mode == "paired":
            lq, mask, spec = self.lq[i], self.scratch[i], None
        else:
            lq, mask, spec = self.degrade(i, epoch)
        obj = None if self.object_masks is None else self.object_masks[i]
        return Sample(self.stems[i], self.hq[i], lq, mask, self.captions[i].split(), obj, spec)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)


def load_paired_dataset(directory, mode: str = "paired", seed: int = 0, severity: float = 0.7) -> PairedDataset:
    return PairedDataset(directory, mode=mode, seed=seed, severity=severity)


def degrade_directory(in_dir, out_dir, severity: float, seed: int) -> Path:
    """Materialise a paired dataset from a clean one (the ``degrade`` command)."""
    src = PairedDataset(in_dir, mode="on_the_fly", seed=seed, severity=severity)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, stem in enumerate(src.stems):
        item = src.sample(i)
        write_png(out / f"{stem}_hq.png", item.hq)
        write_png(out / f"{stem}_lq.png", item.lq)
        write_png(out / f"{stem}_scratch.png", item.scratch_mask)
        if item.object_mask is not None:
            write_png(out / f"{stem}_obj.png", item.object_mask)
        (out / f"{stem}.txt").write_text(src.captions[i] + "\n", encoding="utf-8")
        (out / f"{stem}_spec.json").write_text(item.spec.to_json() + "\n", encoding="utf-8")
        entries.append({"stem": stem, "caption": src.captions[i]})
    _write_manifest(out, entries, {"kind": "paired", "source": str(Path(in_dir).name),
                                   "degradation": {"seed": seed, "severity": severity}})
    return out
