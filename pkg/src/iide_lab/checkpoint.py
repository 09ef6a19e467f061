"""Portable checkpoints: a JSON manifest plus one little-endian float32 blob.

A checkpoint is a directory::

    manifest.json   {"format_version", "tensors": {name: {dtype, shape, offset,
                     nbytes, sha256}}, "metadata": {...}}
    tensors.bin     row-major float32 data, tensors concatenated in sorted-name order

Everything written is deterministic (sorted keys, fixed endianness), so two
saves of equal state are byte-identical.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = "iide-ckpt/1"
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def save_checkpoint(path, tensors: dict[str, torch.Tensor], metadata: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4", order="C")
        raw = arr.tobytes(order="C")
        entries[name] = {"dtype": "float32", "shape": list(arr.shape), "offset": offset,
                         "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()}
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries, "metadata": metadata or {}}
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not (path / MANIFEST).exists() or not (path / BLOB).exists():
        raise CheckpointError(f"{path} is not a checkpoint directory")
    manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format {version!r} is not supported (expected {FORMAT_VERSION!r})")
    blob = (path / BLOB).read_bytes()
    tensors = {}
    for name, e in manifest["tensors"].items():
        start, stop = e["offset"], e["offset"] + e["nbytes"]
        if e["dtype"] != "float32":
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {e['dtype']!r}")
        if stop > len(blob) or int(np.prod(e["shape"], dtype=np.int64)) * 4 != e["nbytes"]:
            raise CheckpointError(f"tensor {name!r} lies outside the blob (truncated checkpoint?)")
        raw = blob[start:stop]
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise ChecksumError(f"checksum mismatch for tensor {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        tensors[name] = torch.from_numpy(arr.copy())
    return tensors, manifest.get("metadata", {})


def checkpoint_hash(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    h.update((path / MANIFEST).read_bytes())
    h.update((path / BLOB).read_bytes())
    return h.hexdigest()


def encode_rng_state(state: torch.Tensor) -> str:
    return base64.b64encode(state.numpy().tobytes()).decode("ascii")


def decode_rng_state(text: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy())


def config_hash(config) -> str:
    d = asdict(config) if hasattr(config, "__dataclass_fields__") else dict(config)
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:16]


# -- model / codec helpers ---------------------------------------------------------

def _prefixed(prefix: str, state: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in state.items()}


def _strip(prefix: str, tensors: dict) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}


def save_model(path, model, metadata: dict | None = None, optimizer=None, codec=None) -> Path:
    """Write model weights, optionally with optimiser moments and the codec it runs on."""
    from .denoiser import ConditionalDenoiser

    assert isinstance(model, ConditionalDenoiser)
    tensors = {**_prefixed("base", model.base.state_dict()), **_prefixed("control", model.control.state_dict())}
    meta = {"kind": "denoiser", "model_config": asdict(model.config), **(metadata or {})}
    if codec is not None:
        tensors.update(_prefixed("codec", codec.state_dict()))
        meta["codec_config"] = asdict(codec.config)
    if optimizer is not None:
        state = optimizer.state_dict()
        for idx, pstate in state["state"].items():
            for key, val in pstate.items():
                tensors[f"optim/{int(idx):04d}/{key}"] = torch.as_tensor(val, dtype=torch.float32).reshape(
                    val.shape if isinstance(val, torch.Tensor) else ())
        meta["optimizer"] = {"param_groups": state["param_groups"]}
    return save_checkpoint(path, tensors, meta)


def load_model(path, with_optimizer_state: bool = False):
    from .denoiser import ConditionalDenoiser, ModelConfig

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise CheckpointError(f"{path} does not hold a denoiser (kind={meta.get('kind')!r})")
    cfg = ModelConfig(**meta["model_config"])
    model = ConditionalDenoiser(cfg)
    model.base.load_state_dict(_strip("base", tensors))
    model.control.load_state_dict(_strip("control", tensors))
    model.base.requires_grad_(False)
    model.eval()
    if not with_optimizer_state:
        return model, meta
    optim = {}
    for name, val in _strip("optim", tensors).items():
        idx, key = name.split("/")
        optim.setdefault(int(idx), {})[key] = val
    return model, meta, optim


def save_codec(path, codec, metadata: dict | None = None) -> Path:
    meta = {"kind": "codec", "codec_config": asdict(codec.config), **(metadata or {})}
    return save_checkpoint(path, dict(codec.state_dict()), meta)


def load_codec(path):
    """Codec from a codec checkpoint or from a model checkpoint that embeds one."""
    from .codec import Codec, CodecConfig

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") == "denoiser" and "codec_config" in meta:
        tensors = _strip("codec", tensors)
    elif meta.get("kind") != "codec":
        raise CheckpointError(f"{path} does not hold a codec (kind={meta.get('kind')!r})")
    codec = Codec(CodecConfig(**meta["codec_config"]))
    codec.load_state_dict(tensors)
    return codec.eval(), meta
