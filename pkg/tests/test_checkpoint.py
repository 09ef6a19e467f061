import json

import pytest
import torch

from iide_lab.checkpoint import (FORMAT_VERSION, CheckpointError, CheckpointVersionError, ChecksumError,
                                 checkpoint_hash, decode_rng_state, encode_rng_state, load_checkpoint, load_codec,
                                 load_model, save_checkpoint, save_codec, save_model)
from iide_lab.codec import CodecConfig, init_codec
from iide_lab.denoiser import parameter_hash

from conftest import perturb_projections


def test_roundtrip_bit_exact(tmp_path):
    g = torch.Generator().manual_seed(0)
    tensors = {"b": torch.randn(3, 4, generator=g), "a": torch.randn(5, generator=g), "s": torch.tensor(2.5)}
    save_checkpoint(tmp_path / "ck", tensors, {"step": 7})
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"step": 7}
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert torch.equal(loaded[k], tensors[k])


def test_save_is_deterministic(tmp_path):
    tensors = {"w": torch.arange(6.0).view(2, 3)}
    save_checkpoint(tmp_path / "a", tensors, {"x": 1})
    save_checkpoint(tmp_path / "b", tensors, {"x": 1})
    assert checkpoint_hash(tmp_path / "a") == checkpoint_hash(tmp_path / "b")


def test_blob_is_little_endian_float32(tmp_path):
    save_checkpoint(tmp_path / "ck", {"w": torch.tensor([1.0])})
    assert (tmp_path / "ck" / "tensors.bin").read_bytes() == b"\x00\x00\x80\x3f"


def test_bad_checksum(tmp_path):
    save_checkpoint(tmp_path / "ck", {"w": torch.ones(4)})
    path = tmp_path / "ck" / "manifest.json"
    doc = json.loads(path.read_text())
    doc["tensors"]["w"]["sha256"] = "0" * 64
    path.write_text(json.dumps(doc))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "ck")


def test_future_version_names_both(tmp_path):
    save_checkpoint(tmp_path / "ck", {"w": torch.ones(4)})
    path = tmp_path / "ck" / "manifest.json"
    doc = json.loads(path.read_text())
    doc["format_version"] = "iide-ckpt/9"
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointVersionError) as err:
        load_checkpoint(tmp_path / "ck")
    assert "iide-ckpt/9" in str(err.value) and FORMAT_VERSION in str(err.value)


def test_truncated_blob(tmp_path):
    save_checkpoint(tmp_path / "ck", {"w": torch.ones(4), "z": torch.ones(4)})
    blob = tmp_path / "ck" / "tensors.bin"
    blob.write_bytes(blob.read_bytes()[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "ck")


def test_not_a_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_rng_state_roundtrip():
    state = torch.Generator().manual_seed(5).get_state()
    assert torch.equal(decode_rng_state(encode_rng_state(state)), state)


def test_model_roundtrip_with_optimizer(tmp_path, small_model):
    perturb_projections(small_model)
    opt = torch.optim.Adam(small_model.control.parameters(), lr=1e-3)
    small_model.control.zero_skips[0].weight.sum().backward()
    opt.step()
    save_model(tmp_path / "m", small_model, {"step": 1}, opt)
    model, meta, optim = load_model(tmp_path / "m", with_optimizer_state=True)
    assert meta["step"] == 1 and meta["model_config"]["T"] == small_model.config.T
    assert model.config == small_model.config
    for a, b in zip(small_model.state_dict().values(), model.state_dict().values()):
        assert torch.equal(a, b)
    assert parameter_hash(list(model.base.parameters())) == parameter_hash(list(small_model.base.parameters()))
    assert optim and all(set(v) == {"step", "exp_avg", "exp_avg_sq"} for v in optim.values())
    with pytest.raises(CheckpointError):
        load_codec(tmp_path / "m")


def test_codec_roundtrip(tmp_path):
    codec = init_codec(CodecConfig(hidden=(8, 16)), seed=3)
    codec.latent_scale.fill_(0.37)
    save_codec(tmp_path / "c", codec)
    back, meta = load_codec(tmp_path / "c")
    assert back.config == codec.config and meta["kind"] == "codec"
    for a, b in zip(codec.state_dict().values(), back.state_dict().values()):
        assert torch.equal(a, b)
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "c")


def test_model_checkpoint_can_carry_its_codec(tmp_path, small_model, icodec):
    save_model(tmp_path / "m", small_model, codec=icodec)
    codec, meta = load_codec(tmp_path / "m")
    assert codec.config == icodec.config and meta["kind"] == "denoiser"
    model, _ = load_model(tmp_path / "m")
    assert model.config == small_model.config
