import hashlib
import json

import numpy as np
import pytest

from iide_lab.data import (DatasetError, PairingError, ShapesDatasetConfig, degrade_directory, derive_seed,
                           generate_shapes_dataset, load_paired_dataset, quantize, read_png, write_png)
from iide_lab.denoiser import load_vocabulary


def dir_digest(path):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(path.iterdir())}


@pytest.fixture(scope="module")
def shapes_dir(tmp_path_factory):
    return generate_shapes_dataset(ShapesDatasetConfig(n_images=100, seed=4), tmp_path_factory.mktemp("shapes"))


def test_generates_exact_triples(shapes_dir):
    names = {p.name for p in shapes_dir.iterdir()}
    assert len([n for n in names if n.endswith("_hq.png")]) == 100
    assert len([n for n in names if n.endswith("_obj.png")]) == 100
    assert len([n for n in names if n.endswith(".txt")]) == 100
    assert "manifest.json" in names and len(names) == 301


def test_captions_use_vocabulary(shapes_dir):
    vocab = set(load_vocabulary())
    for p in shapes_dir.glob("*.txt"):
        words = p.read_text().split()
        assert len(words) == 2 and set(words) <= vocab


def test_every_shape_and_color_occurs(shapes_dir):
    manifest = json.loads((shapes_dir / "manifest.json").read_text())
    words = {w for e in manifest["entries"] for w in e["caption"].split()}
    assert words == set(ShapesDatasetConfig().shapes) | set(ShapesDatasetConfig().colors)


def test_regeneration_byte_identical(shapes_dir, tmp_path):
    again = generate_shapes_dataset(ShapesDatasetConfig(n_images=100, seed=4), tmp_path / "again")
    assert dir_digest(again) == dir_digest(shapes_dir)


def test_config_validation(tmp_path):
    with pytest.raises(DatasetError):
        generate_shapes_dataset(ShapesDatasetConfig(n_images=0), tmp_path)
    with pytest.raises(DatasetError):
        generate_shapes_dataset(ShapesDatasetConfig(colors=("purple",)), tmp_path)


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetError):
        generate_shapes_dataset(ShapesDatasetConfig(n_images=1), blocker / "sub")


def test_png_roundtrip_is_quantisation(tmp_path, rng):
    img = rng.random((3, 8, 8))
    write_png(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_png(tmp_path / "a.png"), quantize(img))
    write_png(tmp_path / "m.png", img[:1])
    assert read_png(tmp_path / "m.png").shape == (1, 8, 8)


def test_on_the_fly_is_deterministic(shapes_dir):
    a = load_paired_dataset(shapes_dir, "on_the_fly", seed=2, severity=0.7)
    b = load_paired_dataset(shapes_dir, "on_the_fly", seed=2, severity=0.7)
    assert len(a) == 100
    for x, y in zip(a, b):
        assert np.array_equal(x.lq, y.lq) and x.stem == y.stem
    assert not np.array_equal(a.sample(0, epoch=0).lq, a.sample(0, epoch=1).lq)


def test_paired_directory_matches_on_the_fly(shapes_dir, tmp_path):
    out = degrade_directory(shapes_dir, tmp_path / "paired", severity=0.5, seed=9)
    paired = load_paired_dataset(out, "paired")
    fly = load_paired_dataset(shapes_dir, "on_the_fly", seed=9, severity=0.5)
    assert paired.stems == fly.stems
    for i in (0, 17, 99):
        np.testing.assert_array_equal(paired.sample(i).lq, fly.sample(i).lq)
        np.testing.assert_array_equal(paired.sample(i).scratch_mask, fly.sample(i).scratch_mask)


def test_missing_counterpart_names_stem(shapes_dir, tmp_path):
    out = degrade_directory(shapes_dir, tmp_path / "paired", severity=0.5, seed=9)
    (out / "00042_lq.png").unlink()
    with pytest.raises(PairingError, match="00042"):
        load_paired_dataset(out, "paired")


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        load_paired_dataset(tmp_path, "paired")


def test_derive_seed_stable():
    assert derive_seed(0, "00001") == derive_seed(0, "00001")
    assert derive_seed(0, "00001") != derive_seed(1, "00001")
    assert 0 <= derive_seed("x") < 2**31 - 1
