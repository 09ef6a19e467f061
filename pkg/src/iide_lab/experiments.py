"""Reference experiments at toy scale, cached on disk.

The reference setup trains a latent codec, pretrains the base denoiser as an
unconditional prior, then fine-tunes control branches. Every stage is
stored under ``cache_dir() / "reference" / <setup hash>`` and reloaded on
later calls, so the acceptance suite only pays for training once.

Run ``python -m iide_lab.experiments`` to build the whole cache up front.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_codec, load_model, save_codec, save_model
from .codec import Codec, CodecConfig, CodecTrainConfig, roundtrip_error, train_codec
from .data import (ShapesDatasetConfig, cache_dir, degrade_directory, generate_shapes_dataset, load_paired_dataset,
                   read_manifest)
from .degradation import ColorFade, apply_operator
from .denoiser import ConditionalDenoiser, ModelConfig, init_model
from .metrics import CANONICAL_HUES, EvalConfig, MetricReport, evaluate_dataset, hue_distance, mean_hue
from .pipeline import restore_batch
from .trainer import PretrainConfig, TrainConfig, fit, pretrain_base

logger = logging.getLogger(__name__)

CHROMATIC = ("red", "yellow", "green", "blue")


@dataclass(frozen=True)
class ReferenceSetup:
    n_train: int = 2000
    n_heldout: int = 64
    n_hue: int = 50
    image_size: int = 32
    severity: float = 0.7
    train_seed: int = 0
    heldout_seed: int = 1
    hue_seed: int = 2
    codec: CodecConfig = field(default_factory=CodecConfig)
    codec_train: CodecTrainConfig = field(default_factory=CodecTrainConfig)
    widths: tuple[int, int, int] = (32, 64, 64)
    T: int = 1000
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    batch_size: int = 32
    lr: float = 1e-3
    steps: int = 10000
    ablation_steps: int = 3000
    ablation_seeds: tuple[int, ...] = (0, 1, 2)
    p_iide: float = 0.5

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=list).encode()).hexdigest()[:12]

    def model_config(self, seed: int = 0) -> ModelConfig:
        return ModelConfig(latent_channels=self.codec.latent_channels,
                           latent_size=self.image_size // self.codec.downscale_factor,
                           widths=self.widths, T=self.T, seed=seed)

    def train_config(self, p_iide: float, seed: int, steps: int) -> TrainConfig:
        return TrainConfig(p_iide=p_iide, T=self.T, batch_size=self.batch_size, lr=self.lr, steps=steps, seed=seed)


class Reference:
    """Lazily built, disk-cached artifacts of one :class:`ReferenceSetup`."""

    def __init__(self, setup: ReferenceSetup | None = None, root=None):
        self.setup = setup or ReferenceSetup()
        self.root = Path(root) if root is not None else cache_dir() / "reference" / self.setup.digest()
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "setup.json").write_text(json.dumps(asdict(self.setup), indent=1, sort_keys=True, default=list)
                                              + "\n", encoding="utf-8")
        self._codec: Codec | None = None
        self._base: ConditionalDenoiser | None = None

    # -- data ------------------------------------------------------------------

    def _dataset_dir(self, name: str, n: int, seed: int, colors=None) -> Path:
        out = self.root / name
        if not (out / "manifest.json").exists():
            cfg = ShapesDatasetConfig(n_images=n, size=self.setup.image_size, seed=seed)
            if colors is not None:
                cfg = replace(cfg, colors=tuple(colors))
            generate_shapes_dataset(cfg, out)
        return out

    def train_dir(self) -> Path:
        return self._dataset_dir("train", self.setup.n_train, self.setup.train_seed)

    def heldout_dir(self) -> Path:
        out = self.root / "heldout"
        if not (out / "manifest.json").exists():
            clean = self._dataset_dir("heldout_clean", self.setup.n_heldout, self.setup.heldout_seed)
            degrade_directory(clean, out, self.setup.severity, self.setup.heldout_seed)
        return out

    def hue_dir(self) -> Path:
        return self._dataset_dir("hue_clean", self.setup.n_hue, self.setup.hue_seed, colors=CHROMATIC)

    def train_dataset(self):
        return load_paired_dataset(self.train_dir(), "on_the_fly", seed=self.setup.train_seed,
                                   severity=self.setup.severity)

    def heldout_dataset(self):
        return load_paired_dataset(self.heldout_dir(), "paired")

    # -- models ----------------------------------------------------------------

    def codec(self) -> Codec:
        if self._codec is None:
            path = self.root / "codec"
            if (path / "manifest.json").exists():
                self._codec, _ = load_codec(path)
            else:
                images = torch.from_numpy(self.train_dataset().hq).float()
                codec, losses = train_codec(images, self.setup.codec, self.setup.codec_train, log_every=500)
                save_codec(path, codec, {"final_loss": losses[-1] if losses else 0.0,
                                         "roundtrip_error": roundtrip_error(codec, images[:256])})
                self._codec = codec
        return self._codec

    def base(self) -> ConditionalDenoiser:
        """Pretrained, frozen base with a freshly cloned control branch."""
        if self._base is None:
            path = self.root / "base"
            if (path / "manifest.json").exists():
                self._base, _ = load_model(path)
            else:
                model = init_model(self.setup.model_config())
                images = torch.from_numpy(self.train_dataset().hq).float()
                losses = pretrain_base(model, self.codec(), images, self.setup.pretrain, log_every=500)
                save_model(path, model, {"final_loss": float(np.mean(losses[-100:]))}, codec=self.codec())
                self._base = model
        return self._base

    def run_name(self, p_iide: float, seed: int, steps: int) -> str:
        return f"control_p{p_iide:g}_seed{seed}_steps{steps}"

    def trained(self, p_iide: float, seed: int = 0, steps: int | None = None) -> ConditionalDenoiser:
        steps = self.setup.steps if steps is None else steps
        path = self.root / self.run_name(p_iide, seed, steps)
        if (path / "final" / "manifest.json").exists():
            return load_model(path / "final")[0]
        base = self.base()
        model = init_model(self.setup.model_config(seed), base_state=base.base.state_dict())
        tc = self.setup.train_config(p_iide, seed, steps)
        logger.info("training %s", path.name)
        # periodic checkpoints let an interrupted run resume where it stopped
        model, _ = fit(model, self.codec(), self.train_dataset(), replace(tc, checkpoint_interval=1000),
                       checkpoint_dir=path, resume=True, log_every=500)
        save_model(path / "final", model, {"step": steps, "train_config": asdict(tc)}, codec=self.codec())
        return model

    # -- evaluation --------------------------------------------------------------

    def heldout_report(self, p_iide: float, seed: int = 0, steps: int | None = None,
                       config: EvalConfig | None = None) -> MetricReport:
        steps = self.setup.steps if steps is None else steps
        config = config or EvalConfig()
        key = hashlib.sha256(json.dumps(asdict(config), sort_keys=True).encode()).hexdigest()[:8]
        path = self.root / self.run_name(p_iide, seed, steps) / f"heldout_{key}.json"
        if path.exists():
            d = json.loads(path.read_text(encoding="utf-8"))
            d.pop("mean", None)
            return MetricReport(**d)
        report = evaluate_dataset(self.trained(p_iide, seed, steps), self.codec(), self.heldout_dataset(), config,
                                  {"run": self.run_name(p_iide, seed, steps)})
        path.write_text(report.to_json() + "\n", encoding="utf-8")
        return report

    def hue_cases(self, p_iide: float | None = None, seed: int = 0, n_steps: int = 50) -> list[dict]:
        """Restore grayscale versions of the hue set with prompted colours.

        Case ``i`` prompts colour ``CHROMATIC[i % 4]`` whatever the object's
        true colour was, together with the object's shape word.
        """
        p_iide = self.setup.p_iide if p_iide is None else p_iide
        path = self.root / self.run_name(p_iide, seed, self.setup.steps) / f"hue_{n_steps}.json"
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))
        ds = load_paired_dataset(self.hue_dir(), "on_the_fly")
        gray = np.stack([apply_operator(img, ColorFade(grayscale=True)) for img in ds.hq])
        prompts = [[CHROMATIC[i % len(CHROMATIC)], cap.split()[1]] for i, cap in enumerate(ds.captions)]
        model = self.trained(p_iide, seed)
        out = restore_batch(model, self.codec(), torch.from_numpy(gray).float(), None, prompts, n_steps, 1.0,
                            [seed + i for i in range(len(ds))]).numpy()
        cases = []
        for i, stem in enumerate(ds.stems):
            hue = mean_hue(out[i], ds.object_masks[i][0])
            target = CANONICAL_HUES[prompts[i][0]]
            dist = hue_distance(hue, target) if math.isfinite(hue) else 180.0
            cases.append({"stem": stem, "caption": ds.captions[i], "prompt": " ".join(prompts[i]),
                          "hue": hue if math.isfinite(hue) else None, "target": target, "distance": dist})
        path.write_text(json.dumps(cases, indent=1) + "\n", encoding="utf-8")
        return cases


def build_all(setup: ReferenceSetup | None = None) -> Reference:
    """Train and evaluate everything the acceptance suite needs."""
    ref = Reference(setup)
    ref.codec()
    ref.base()
    ref.heldout_report(ref.setup.p_iide, 0)
    ref.hue_cases()
    for seed in ref.setup.ablation_seeds:
        for p in (ref.setup.p_iide, 1.0):
            ref.heldout_report(p, seed, ref.setup.ablation_steps)
    return ref


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    r = build_all()
    print(r.root)
