"""Command-line interface: ``iide-lab <command> [flags]``.

Every command accepts ``--config FILE`` (a JSON object of the command's
fields); explicit flags override it. The effective configuration is written
next to the outputs. On failure a single JSON line
``{"error": <type>, "command": <name>, "message": <text>}`` goes to stderr
and the exit code is 1.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import checkpoint_hash, load_codec, load_model, save_codec, save_model
from .codec import CodecConfig, CodecTrainConfig, identity_codec, train_codec
from .data import (ShapesDatasetConfig, cache_dir, degrade_directory, generate_shapes_dataset, load_paired_dataset,
                   read_manifest, read_png, write_png)
from .denoiser import ModelConfig, init_model
from .metrics import EvalConfig, compare_reports, evaluate_dataset, format_table
from .pipeline import RestoreRequest, restore
from .trainer import PretrainConfig, TrainConfig, fit, pretrain_base

logger = logging.getLogger("iide_lab")

CONFIG_ECHO = "effective_config.json"


def _load_config(path) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    return doc


def _effective(args, defaults: dict) -> dict:
    """Defaults <- config file <- explicit flags."""
    cfg = dict(defaults)
    file_cfg = _load_config(args.config)
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    cfg.update(file_cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _echo(cfg: dict, directory: Path, command: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": __version__, "config": cfg}
    (directory / CONFIG_ECHO).write_text(json.dumps(doc, indent=1, sort_keys=True, default=list) + "\n",
                                         encoding="utf-8")


def _default_out(command: str, cfg: dict) -> Path:
    digest = hashlib.sha256(json.dumps(cfg, sort_keys=True, default=list).encode()).hexdigest()[:12]
    return cache_dir() / "runs" / f"{command}-{digest}"


def _out_dir(args, command: str, cfg: dict) -> Path:
    return Path(args.out) if args.out else _default_out(command, cfg)


def _images(dataset_dir) -> torch.Tensor:
    ds = load_paired_dataset(dataset_dir, "on_the_fly")
    return torch.from_numpy(ds.hq).float()


def _load_codec_arg(path, image_channels: int = 3):
    return identity_codec(image_channels) if path is None else load_codec(path)[0]


def _rgb(image: np.ndarray) -> np.ndarray:
    return np.repeat(image, 3, axis=0) if image.shape[0] == 1 else image


# -- commands ----------------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    cfg = _effective(args, asdict(ShapesDatasetConfig()))
    config = ShapesDatasetConfig(**{**cfg, "shapes": tuple(cfg["shapes"]), "colors": tuple(cfg["colors"])})
    out = _out_dir(args, "gen-data", cfg)
    generate_shapes_dataset(config, out)
    _echo(cfg, out, "gen-data")
    return {"out": str(out), "n_images": config.n_images}


def cmd_degrade(args) -> dict:
    cfg = _effective(args, {"input": None, "severity": 0.7, "seed": 0})
    if cfg["input"] is None:
        raise ValueError("degrade needs --input")
    out = _out_dir(args, "degrade", cfg)
    degrade_directory(cfg["input"], out, cfg["severity"], cfg["seed"])
    _echo(cfg, out, "degrade")
    return {"out": str(out), "n_pairs": len(read_manifest(out)["entries"])}


def cmd_train_codec(args) -> dict:
    defaults = {"dataset": None, "downscale_factor": 2, "latent_channels": 4, "hidden": [32, 64],
                **asdict(CodecTrainConfig())}
    cfg = _effective(args, defaults)
    if cfg["dataset"] is None:
        raise ValueError("train-codec needs --dataset")
    config = CodecConfig(cfg["downscale_factor"], cfg["latent_channels"], tuple(cfg["hidden"]))
    tc = CodecTrainConfig(cfg["steps"], cfg["batch_size"], cfg["lr"], cfg["seed"])
    out = _out_dir(args, "train-codec", cfg)
    images = _images(cfg["dataset"])
    codec, losses = train_codec(images, config, tc, log_every=args.log_every)
    save_codec(out / "codec", codec, {"final_loss": losses[-1] if losses else 0.0})
    _echo(cfg, out, "train-codec")
    return {"out": str(out / "codec"), "final_loss": losses[-1] if losses else 0.0,
            "latent_scale": float(codec.latent_scale)}


def _model_defaults() -> dict:
    d = asdict(ModelConfig())
    d.pop("vocab")
    d.pop("latent_channels")
    d.pop("latent_size")
    d["widths"] = list(d["widths"])
    return d


def cmd_pretrain_base(args) -> dict:
    defaults = {"dataset": None, "codec": None, **_model_defaults(),
                **{f"pretrain_{k}": v for k, v in asdict(PretrainConfig()).items() if k != "T"}}
    cfg = _effective(args, defaults)
    if cfg["dataset"] is None:
        raise ValueError("pretrain-base needs --dataset")
    codec = _load_codec_arg(cfg["codec"])
    images = _images(cfg["dataset"])
    f = codec.config.downscale_factor
    mcfg = ModelConfig(latent_channels=codec.config.latent_channels, latent_size=images.shape[-1] // f,
                       widths=tuple(cfg["widths"]), time_dim=cfg["time_dim"], text_dim=cfg["text_dim"],
                       groups=cfg["groups"], T=cfg["T"], seed=cfg["seed"])
    pc = PretrainConfig(cfg["pretrain_steps"], cfg["pretrain_batch_size"], cfg["pretrain_lr"],
                        cfg["pretrain_seed"], cfg["T"])
    model = init_model(mcfg)
    losses = pretrain_base(model, codec, images, pc, log_every=args.log_every)
    out = _out_dir(args, "pretrain-base", cfg)
    save_model(out / "base", model, {"pretrain": asdict(pc), "final_loss": losses[-1] if losses else 0.0},
               codec=codec)
    _echo(cfg, out, "pretrain-base")
    return {"out": str(out / "base"), "final_loss": losses[-1] if losses else 0.0}


def cmd_train(args) -> dict:
    defaults = {"dataset": None, "codec": None, "base": None, "severity": 0.7, "degradation_seed": 0,
                "t_max": 1000, **_model_defaults(),
                **{k: v for k, v in asdict(TrainConfig()).items() if k != "T"}}
    defaults.pop("T")  # the model's T is set by --t-max
    cfg = _effective(args, defaults)
    if cfg["dataset"] is None:
        raise ValueError("train needs --dataset")
    out = _out_dir(args, "train", cfg)
    ds = load_paired_dataset(cfg["dataset"], "on_the_fly", seed=cfg["degradation_seed"], severity=cfg["severity"])
    if cfg["base"] is not None:
        model, _ = load_model(cfg["base"])
        codec = load_codec(cfg["base"])[0] if cfg["codec"] is None else load_codec(cfg["codec"])[0]
        if model.config.T != cfg["t_max"]:
            raise ValueError(f"--t-max {cfg['t_max']} differs from the base model's T={model.config.T}")
        if cfg["seed"] != model.config.seed:
            model = init_model(replace(model.config, seed=cfg["seed"]), base_state=model.base.state_dict())
    else:
        codec = _load_codec_arg(cfg["codec"])
        f = codec.config.downscale_factor
        model = init_model(ModelConfig(latent_channels=codec.config.latent_channels,
                                       latent_size=ds.hq.shape[-1] // f, widths=tuple(cfg["widths"]),
                                       time_dim=cfg["time_dim"], text_dim=cfg["text_dim"], groups=cfg["groups"],
                                       T=cfg["t_max"], seed=cfg["seed"]))
    tc = TrainConfig(p_iide=cfg["p_iide"], T=cfg["t_max"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                     steps=cfg["steps"], checkpoint_interval=cfg["checkpoint_interval"], seed=cfg["seed"],
                     use_prompts=cfg["use_prompts"])
    model, report = fit(model, codec, ds, tc, checkpoint_dir=out / "checkpoints", resume=bool(args.resume),
                        log_every=args.log_every)
    final = save_model(out / "final", model, {"step": tc.steps, "train_config": asdict(tc)}, codec=codec)
    _echo(cfg, out, "train")
    return {"out": str(final), "checkpoint_hash": checkpoint_hash(final),
            "final_loss": report.losses[-1] if report.losses else None}


def cmd_restore(args) -> dict:
    cfg = _effective(args, {"checkpoint": None, "input": None, "mask": None, "prompt": None, "steps": 50,
                            "fidelity_weight": 1.0, "seed": 0, "out": None})
    for key in ("checkpoint", "input", "out"):
        if cfg[key] is None:
            raise ValueError(f"restore needs --{key}")
    model, _ = load_model(cfg["checkpoint"])
    codec, _ = load_codec(cfg["checkpoint"])
    image = _rgb(read_png(cfg["input"]))
    mask = None
    if cfg["mask"] is not None:
        mask = (read_png(cfg["mask"])[:1] > 0.5).astype(np.float32)
    req = RestoreRequest(image=torch.from_numpy(image), scratch_mask=None if mask is None else torch.from_numpy(mask),
                         prompt=cfg["prompt"], n_steps=cfg["steps"], fidelity_weight=cfg["fidelity_weight"],
                         seed=cfg["seed"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(out, restore(model, codec, req).numpy())
    echo = out.with_name(out.stem + ".config.json")
    echo.write_text(json.dumps({"command": "restore", "version": __version__, "config": cfg}, indent=1,
                               sort_keys=True) + "\n", encoding="utf-8")
    return {"out": str(out), "sha256": hashlib.sha256(out.read_bytes()).hexdigest()}


def _dataset_for_eval(path, seed: int, severity: float):
    kind = read_manifest(path).get("kind")
    mode = "paired" if kind == "paired" else "on_the_fly"
    return load_paired_dataset(path, mode, seed=seed, severity=severity)


def cmd_eval(args) -> dict:
    cfg = _effective(args, {"checkpoint": None, "baseline_checkpoint": None, "dataset": None, "report": None,
                            "steps": 50, "fidelity_weight": 1.0, "seed": 0, "batch_size": 64,
                            "use_prompts": True, "severity": 0.7, "degradation_seed": 0})
    for key in ("checkpoint", "dataset", "report"):
        if cfg[key] is None:
            raise ValueError(f"eval needs --{key.replace('_', '-')}")
    ds = _dataset_for_eval(cfg["dataset"], cfg["degradation_seed"], cfg["severity"])
    ec = EvalConfig(n_steps=cfg["steps"], fidelity_weight=cfg["fidelity_weight"], seed=cfg["seed"],
                    batch_size=cfg["batch_size"], use_prompts=cfg["use_prompts"])

    def run(path):
        model, _ = load_model(path)
        codec, _ = load_codec(path)
        meta = {"checkpoint": checkpoint_hash(path)[:16], "dataset": Path(cfg["dataset"]).name}
        return evaluate_dataset(model, codec, ds, ec, meta)

    report = run(cfg["checkpoint"])
    doc = {"report": report.to_dict()}
    rows = [("candidate", report)]
    if cfg["baseline_checkpoint"] is not None:
        base = run(cfg["baseline_checkpoint"])
        doc["baseline"] = base.to_dict()
        doc["comparison"] = compare_reports(report, base)
        rows.insert(0, ("baseline", base))
    out = Path(cfg["report"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    table = format_table(rows)
    out.with_suffix(".txt").write_text(table + "\n", encoding="utf-8")
    _echo(cfg, out.parent, "eval")
    summary = {"report": str(out), "PSNR": report.mean_psnr, "SSIM": report.mean_ssim,
               "input_PSNR": report.mean_input_psnr}
    if "comparison" in doc:
        summary["comparison"] = doc["comparison"]
    return summary


# -- parser ------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", help="JSON file with this command's fields; flags override it")
    if out:
        p.add_argument("--out", help="output directory (default: a run folder under IIDE_LAB_CACHE)")
    p.add_argument("--log-every", type=int, default=0, dest="log_every")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iide-lab", description="Toy diffusion restoration with internal detail "
                                 "enhancement: data, training, restoration and evaluation.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the toy shapes corpus")
    _common(p)
    p.add_argument("--n-images", type=int, dest="n_images")
    p.add_argument("--size", type=int)
    p.add_argument("--shapes", nargs="+")
    p.add_argument("--colors", nargs="+")
    p.add_argument("--texture-amplitude", type=float, dest="texture_amplitude")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("degrade", help="write degraded counterparts of a clean dataset")
    _common(p)
    p.add_argument("--input")
    p.add_argument("--severity", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train-codec", help="train the image/latent autoencoder")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--downscale-factor", type=int, dest="downscale_factor")
    p.add_argument("--latent-channels", type=int, dest="latent_channels")
    p.add_argument("--hidden", type=int, nargs="+")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_codec)

    def model_flags(p):
        p.add_argument("--widths", type=int, nargs=3)
        p.add_argument("--time-dim", type=int, dest="time_dim")
        p.add_argument("--text-dim", type=int, dest="text_dim")
        p.add_argument("--groups", type=int)

    p = sub.add_parser("pretrain-base", help="train the frozen base denoiser as an unconditional prior")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--codec", help="codec checkpoint (default: identity codec)")
    model_flags(p)
    p.add_argument("--t-max", type=int, dest="T")
    p.add_argument("--seed", type=int, help="model initialisation seed")
    p.add_argument("--steps", type=int, dest="pretrain_steps")
    p.add_argument("--batch-size", type=int, dest="pretrain_batch_size")
    p.add_argument("--lr", type=float, dest="pretrain_lr")
    p.add_argument("--train-seed", type=int, dest="pretrain_seed")
    p.set_defaults(func=cmd_pretrain_base)

    p = sub.add_parser("train", help="fine-tune the control branch (IIDE mix-up training)")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--codec", help="codec checkpoint (default: the one stored with --base, else identity)")
    p.add_argument("--base", help="pretrained base checkpoint from pretrain-base")
    model_flags(p)
    p.add_argument("--p-iide", type=float, dest="p_iide", help="probability of keeping the degraded condition")
    p.add_argument("--steps", type=int)
    p.add_argument("--t-max", type=int, dest="t_max", help="number of diffusion steps T")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-interval", type=int, dest="checkpoint_interval")
    p.add_argument("--severity", type=float)
    p.add_argument("--degradation-seed", type=int, dest="degradation_seed")
    p.add_argument("--no-prompts", action="store_false", dest="use_prompts", default=None)
    p.add_argument("--resume", action="store_true", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore one PNG image")
    _common(p, out=False)
    p.add_argument("--checkpoint")
    p.add_argument("--input")
    p.add_argument("--mask")
    p.add_argument("--prompt")
    p.add_argument("--steps", type=int)
    p.add_argument("--fidelity-weight", type=float, dest="fidelity_weight")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output PNG path")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset, optionally against a baseline")
    _common(p, out=False)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline-checkpoint", dest="baseline_checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--report", help="JSON report path; an aligned table is written beside it")
    p.add_argument("--steps", type=int)
    p.add_argument("--fidelity-weight", type=float, dest="fidelity_weight")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--no-prompts", action="store_false", dest="use_prompts", default=None)
    p.add_argument("--severity", type=float)
    p.add_argument("--degradation-seed", type=int, dest="degradation_seed")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.log_every else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 -- every failure becomes one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        if args.verbose:
            raise
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
