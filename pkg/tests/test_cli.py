import json
import subprocess
import sys

import pytest

from iide_lab.checkpoint import checkpoint_hash
from iide_lab.cli import main

TINY_MODEL = ["--widths", "8", "16", "16", "--time-dim", "32", "--text-dim", "8", "--groups", "4", "--t-max", "50"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n-images", "8", "--size", "16", "--seed", "5", "--out", str(root / "data")]) == 0
    assert main(["degrade", "--input", str(root / "data"), "--severity", "0.6", "--seed", "2",
                 "--out", str(root / "paired")]) == 0
    args = ["train", "--dataset", root / "data", *TINY_MODEL, "--steps", "3", "--batch-size", "4"]
    assert main([str(a) for a in args + ["--out", root / "run"]]) == 0
    return root


def test_gen_data_echoes_config(workdir):
    echo = json.loads((workdir / "data" / "effective_config.json").read_text())
    assert echo["command"] == "gen-data" and echo["config"]["n_images"] == 8


def test_config_file_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_images": 3, "size": 16, "seed": 1}))
    code, out, _ = run(capsys, "gen-data", "--config", cfg, "--n-images", 2, "--out", tmp_path / "d")
    assert code == 0 and json.loads(out)["n_images"] == 2
    assert json.loads((tmp_path / "d" / "effective_config.json").read_text())["config"]["seed"] == 1


def test_unknown_config_field_is_an_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"colour": "red"}))
    code, _, err = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "d")
    assert code == 1 and json.loads(err.strip().splitlines()[-1])["error"] == "ValueError"


def test_train_is_reproducible(workdir, capsys):
    code, out, _ = run(capsys, "train", "--dataset", workdir / "data", *TINY_MODEL, "--steps", 3, "--batch-size", 4,
                       "--out", workdir / "run_again")
    assert code == 0
    assert json.loads(out)["checkpoint_hash"] == checkpoint_hash(workdir / "run" / "final")


def test_restore_is_reproducible(workdir, capsys):
    common = ["restore", "--checkpoint", workdir / "run" / "final", "--input", workdir / "paired" / "00000_lq.png",
              "--mask", workdir / "paired" / "00000_scratch.png", "--prompt", "red circle", "--steps", 4]
    assert run(capsys, *common, "--out", workdir / "a.png")[0] == 0
    assert run(capsys, *common, "--out", workdir / "b.png")[0] == 0
    assert (workdir / "a.png").read_bytes() == (workdir / "b.png").read_bytes()


def test_restore_grayscale_input(workdir, capsys):
    from iide_lab.data import read_png, write_png

    write_png(workdir / "gray.png", read_png(workdir / "data" / "00001_hq.png").mean(axis=0, keepdims=True))
    code, _, _ = run(capsys, "restore", "--checkpoint", workdir / "run" / "final", "--input", workdir / "gray.png",
                     "--prompt", "blue", "--steps", 2, "--out", workdir / "g.png")
    assert code == 0 and read_png(workdir / "g.png").shape == (3, 16, 16)


def test_eval_with_baseline(workdir, capsys):
    report = workdir / "eval" / "report.json"
    code, out, _ = run(capsys, "eval", "--checkpoint", workdir / "run" / "final", "--baseline-checkpoint",
                       workdir / "run" / "final", "--dataset", workdir / "paired", "--report", report, "--steps", 2)
    assert code == 0
    doc = json.loads(report.read_text())
    assert doc["comparison"]["PSNR_delta"] == 0.0 and len(doc["report"]["psnr"]) == 8
    assert report.with_suffix(".txt").read_text().startswith("Method")


def test_errors_are_machine_readable(workdir, capsys):
    code, _, err = run(capsys, "restore", "--checkpoint", workdir / "run" / "final", "--input", workdir / "none.png",
                       "--out", workdir / "x.png")
    line = json.loads(err.strip().splitlines()[-1])
    assert code == 1 and line["command"] == "restore" and "none.png" in line["message"]
    code, _, err = run(capsys, "restore", "--checkpoint", workdir / "run" / "final", "--input",
                       workdir / "paired" / "00000_lq.png", "--prompt", "mauve", "--out", workdir / "x.png")
    assert code == 1 and json.loads(err.strip().splitlines()[-1])["error"] == "VocabularyError"


def test_train_t_max_must_match_base(workdir, capsys):
    code, _, err = run(capsys, "train", "--dataset", workdir / "data", "--base", workdir / "run" / "final",
                       "--t-max", 1000, "--steps", 1, "--out", workdir / "bad")
    assert code == 1 and "t-max" in json.loads(err.strip().splitlines()[-1])["message"]


def test_default_output_under_cache(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("IIDE_LAB_CACHE", str(tmp_path / "cache"))
    code, out, _ = run(capsys, "gen-data", "--n-images", 1, "--size", 16)
    assert code == 0 and json.loads(out)["out"].startswith(str(tmp_path / "cache"))


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "iide_lab.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
