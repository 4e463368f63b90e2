import hashlib
import subprocess
import sys

import pytest

from coamd.cli import main
from coamd.motion import read_motion
from coamd.pipeline import ConfigError, RunConfig

TINY = """# tiny run
data.num = 48
ae.epochs = 1
mar.epochs = 1
gen.epochs = 1
gen.ode_steps = 2
gen.ar_steps = 2
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    base = ["--config", str(cfg), "--seed", "3"]
    assert main(["gen-data", *base, "--out", str(root / "d")]) == 0
    for cmd in ("train-ae", "train-mar"):
        assert main([cmd, *base, "--data", str(root / "d"), "--out", str(root / "ck")]) == 0
    assert main(["train-gen", *base, "--data", str(root / "d"), "--ckpt", str(root / "ck"),
                 "--out", str(root / "ck")]) == 0
    return root, base


# -- config ------------------------------------------------------------
def test_config_parse_and_hash():
    text = b"# comment\nae.epochs = 3   # trailing\n\nguide.weights=0.5,0.5,0,0\nmar.symmetric=true\n"
    cfg = RunConfig.parse(text)
    assert cfg["ae.epochs"] == 3 and cfg["guide.weights"] == (0.5, 0.5, 0.0, 0.0)
    assert cfg["mar.symmetric"] is True
    assert cfg.sha256 == hashlib.sha256(text).hexdigest()
    assert RunConfig.parse(text, {"ae.epochs": 5})["ae.epochs"] == 5


@pytest.mark.parametrize("text", ["nope.key=1", "ae.epochs", "ae.epochs=three", "guide.gamma=-1",
                                  "guide.weights=1,1", "mar.streams=joints,feet"])
def test_config_rejects(text):
    with pytest.raises(ConfigError, match="malformed config"):
        RunConfig.parse(text)


# -- dispatch ----------------------------------------------------------
def test_gen_data_is_byte_identical(tmp_path):
    for name in "ab":
        assert main(["gen-data", "--seed", "7", "--num", "20", "--out", str(tmp_path / name)]) == 0
    for rel in ("manifest.tsv", "classes.tsv", "motions/s00019.txt", "gen-data.log"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert len(list((tmp_path / "a" / "motions").iterdir())) == 20
    first = (tmp_path / "a" / "gen-data.log").read_text().splitlines()[0]
    assert "seed=7" in first and "config_sha256=" in first


def test_unknown_subcommand_is_usage_error():
    proc = subprocess.run([sys.executable, "-m", "coamd", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


def test_missing_required_flag(capsys):
    with pytest.raises(SystemExit) as e:
        main(["generate", "--out", "x"])
    assert e.value.code == 2


def test_malformed_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("ae.width=wide\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "malformed config" in capsys.readouterr().err


def test_generate_edit_recognize_retrieve_export(trained, capsys):
    root, base = trained
    ck = str(root / "ck")
    assert main(["generate", *base, "--ckpt", ck, "--text", "a person walks forward", "--length", "64",
                 "--guidance", "on", "--gamma", "1.0", "--out", str(root / "g")]) == 0
    x = read_motion(root / "g" / "motion.txt")
    assert x.shape == (64, 9, 3)
    assert (root / "g" / "generate.log").exists()
    assert main(["generate", *base, "--ckpt", ck, "--text", "a person walks forward", "--length", "64",
                 "--guidance", "on", "--gamma", "1.0", "--out", str(root / "g2")]) == 0
    assert (root / "g" / "motion.txt").read_bytes() == (root / "g2" / "motion.txt").read_bytes()

    motion = str(root / "g" / "motion.txt")
    assert main(["edit", *base, "--ckpt", ck, "--motion", motion, "--text", "a person jumps",
                 "--mode", "suffix", "--guidance", "off", "--out", str(root / "e")]) == 0
    assert read_motion(root / "e" / "edited.txt").shape == (64, 9, 3)

    assert main(["recognize", *base, "--ckpt", ck, "--motion", motion, "--out", str(root / "r")]) == 0
    assert len((root / "r" / "recognition.tsv").read_text().splitlines()) == 5

    assert main(["retrieve", *base, "--ckpt", ck, "--data", str(root / "d"), "--text", "walk",
                 "--k", "3", "--out", str(root / "q")]) == 0
    assert len((root / "q" / "retrieval.tsv").read_text().splitlines()) == 3

    assert main(["export-anim", "--motion", motion, "--out", str(root / "a")]) == 0
    assert (root / "a" / "motion.svg").read_bytes().startswith(b"<?xml")


def test_checkpoint_diagnostics(trained, tmp_path, capsys):
    root, base = trained
    motion = str(root / "d" / "motions" / "s00000.txt")
    assert main(["recognize", "--ckpt", str(tmp_path), "--motion", motion, "--out", str(tmp_path / "o")]) == 1
    missing = capsys.readouterr().err
    assert "missing checkpoint" in missing

    swapped = tmp_path / "swapped"
    swapped.mkdir()
    (swapped / "mar.ckpt").write_bytes((root / "ck" / "ae.ckpt").read_bytes())
    assert main(["recognize", "--ckpt", str(swapped), "--motion", motion, "--out", str(tmp_path / "o")]) == 1
    incompatible = capsys.readouterr().err
    assert "incompatible checkpoint" in incompatible and incompatible != missing


def test_evaluate_without_mar_checkpoint(trained, tmp_path, capsys):
    root, base = trained
    ck = tmp_path / "ck"
    ck.mkdir()
    for name in ("ae.ckpt", "gen.ckpt"):
        (ck / name).write_bytes((root / "ck" / name).read_bytes())
    code = main(["evaluate", *base, "--ckpt", str(ck), "--data", str(root / "d"), "--out", str(tmp_path / "o")])
    assert code == 1 and "missing checkpoint" in capsys.readouterr().err


def test_inputs_are_not_mutated(trained, tmp_path):
    root, base = trained
    before = {p: p.read_bytes() for p in (root / "ck").iterdir()}
    main(["generate", *base, "--ckpt", str(root / "ck"), "--text", "wave", "--length", "16",
          "--guidance", "off", "--out", str(tmp_path)])
    assert {p: p.read_bytes() for p in (root / "ck").iterdir()} == before
