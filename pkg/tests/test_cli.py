"""CLI subcommands, config round-trips, metrics determinism and PGM export."""

import json
import os
import pathlib

import numpy as np
import pytest

from queryformer.cli import main, write_pgm
from queryformer.config import (ConfigError, RunConfig, load_config, parse_config,
                                serialize_config)

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "fixtures"

TINY_CFG = """
steps = 4
batch_size = 2
num_queries = 6
num_layers = 2
d = 16
heads = 2
d_model = 16
num_classes = 2
grid_h = 8
grid_w = 8
eval_scenes = 4
"""


def write_cfg(tmp_path, text=TINY_CFG, name="run.cfg", out=None):
    body = text + (f"out_dir = {out}\n" if out else "")
    path = tmp_path / name
    path.write_text(body)
    return path


# ---------------------------------------------------------------------------
# config

def test_config_round_trip_canonical():
    cfg = parse_config("steps = 7\nmode = parallel\nlr = 0.002\n")
    canon = serialize_config(cfg)
    again = parse_config(canon)
    assert serialize_config(again) == canon
    assert again.steps == 7 and again.mode == "parallel" and again.lr == 0.002


def test_config_comments_and_whitespace():
    cfg = parse_config("# comment\n  steps = 9   # trailing\n\nbatch_size=1\n")
    assert cfg.steps == 9 and cfg.batch_size == 1


def test_config_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key 'spam'"):
        parse_config("spam = 1\n")


def test_config_bad_value_names_field():
    with pytest.raises(ConfigError, match="steps"):
        parse_config("steps = banana\n")
    with pytest.raises(ConfigError, match="multiscale"):
        parse_config("multiscale = maybe\n")


def test_config_flag_dependency_validated():
    with pytest.raises(ConfigError, match="attention_prior"):
        parse_config("attention_prior = true\n")


def test_all_fixture_presets_parse():
    presets = sorted(FIXTURES.glob("*.cfg"))
    names = {p.stem for p in presets}
    assert {"gqpos", "no_iterative", "no_pos_encoding", "no_fc", "multiscale",
            "multiscale_fusion", "multiscale_fusion_prior"} <= names
    parsed = {p.stem: load_config(p) for p in presets}
    assert parsed["gqpos"].mode == "gqpos" and not parsed["gqpos"].multiscale
    assert parsed["no_iterative"].mode == "parallel"
    assert parsed["no_pos_encoding"].mode == "no_pe"
    assert parsed["no_fc"].mode == "no_fc"
    assert parsed["multiscale"].multiscale and not parsed["multiscale"].feature_fusion
    assert parsed["multiscale_fusion"].feature_fusion and not parsed["multiscale_fusion"].attention_prior
    full = parsed["multiscale_fusion_prior"]
    assert full.multiscale and full.feature_fusion and full.attention_prior


# ---------------------------------------------------------------------------
# train command

def test_missing_config_file_names_path(tmp_path, capsys):
    rc = main(["train", "--config", str(tmp_path / "absent.cfg")])
    assert rc == 2
    assert "absent.cfg" in capsys.readouterr().err


def test_single_step_run_writes_header_plus_one_record(tmp_path):
    cfg = write_cfg(tmp_path, TINY_CFG.replace("steps = 4", "steps = 1"),
                    out=tmp_path / "out")
    assert main(["train", "--config", str(cfg)]) == 0
    lines = (tmp_path / "out" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    header = json.loads(lines[0])
    assert header["record"] == "header" and header["config"]["steps"] == 1
    record = json.loads(lines[1])
    assert list(record) == ["step", "lr", "loss_total", "loss_class", "loss_l1",
                            "loss_giou", "per_layer_losses"]


def test_rerun_byte_identical(tmp_path, monkeypatch):
    monkeypatch.setenv("QF_THREADS", "1")
    cfg = write_cfg(tmp_path, out=tmp_path / "out1")
    assert main(["train", "--config", str(cfg)]) == 0
    cfg2 = write_cfg(tmp_path, name="run2.cfg", out=tmp_path / "out2")
    # identical settings except the output directory, which is excluded from
    # byte comparison by comparing only the streams and checkpoints
    text1 = (tmp_path / "out1" / "metrics.jsonl").read_bytes()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "out3")]) == 0
    text3 = (tmp_path / "out3" / "metrics.jsonl").read_bytes()
    # headers differ in out_dir; records must be identical
    assert text1.split(b"\n", 1)[1] == text3.split(b"\n", 1)[1]
    del cfg2


def test_seed_override(tmp_path):
    cfg = write_cfg(tmp_path, out=tmp_path / "out")
    assert main(["train", "--config", str(cfg), "--seed", "9"]) == 0
    header = json.loads((tmp_path / "out" / "metrics.jsonl").read_text().splitlines()[0])
    assert header["config"]["seed"] == 9


def test_lrdrop_checkpoint_written(tmp_path):
    body = TINY_CFG.replace("steps = 4", "steps = 6") + "lr_drop_step = 4\n"
    cfg = write_cfg(tmp_path, body, out=tmp_path / "out")
    assert main(["train", "--config", str(cfg)]) == 0
    assert (tmp_path / "out" / "checkpoint_lrdrop.qfc").exists()
    assert (tmp_path / "out" / "checkpoint_final.qfc").exists()


# ---------------------------------------------------------------------------
# eval command

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_run")
    cfg = write_cfg(tmp, out=tmp / "out")
    assert main(["train", "--config", str(cfg)]) == 0
    return tmp / "out"


def test_eval_untrained_ap_near_zero(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TINY_CFG.replace("steps = 4", "steps = 1") +
                    "eval_scenes = 40\nlr = 1e-12\n", out=tmp_path / "out")
    assert main(["train", "--config", str(cfg)]) == 0
    rc = main(["eval", "--checkpoint", str(tmp_path / "out" / "checkpoint_final.qfc"),
               "--eval-seed", "5"])
    assert rc == 0
    out = capsys.readouterr().out
    ap = float([l for l in out.splitlines() if l.startswith("toy_ap")][0].split("=")[1])
    assert ap < 0.05


def test_eval_twice_identical(trained, capsys, tmp_path):
    ckpt = str(trained / "checkpoint_final.qfc")
    assert main(["eval", "--checkpoint", ckpt, "--eval-seed", "3",
                 "--out", str(tmp_path / "r1.json")]) == 0
    first = capsys.readouterr().out
    assert main(["eval", "--checkpoint", ckpt, "--eval-seed", "3",
                 "--out", str(tmp_path / "r2.json")]) == 0
    second = capsys.readouterr().out
    assert first == second
    assert json.loads((tmp_path / "r1.json").read_text())["toy_ap"] == \
        json.loads((tmp_path / "r2.json").read_text())["toy_ap"]


def test_eval_corrupted_checkpoint_clean_error(trained, tmp_path, capsys):
    blob = (trained / "checkpoint_final.qfc").read_bytes()
    bad = tmp_path / "bad.qfc"
    bad.write_bytes(blob[: len(blob) // 2])
    rc = main(["eval", "--checkpoint", str(bad), "--eval-seed", "1"])
    assert rc == 2
    assert "truncated" in capsys.readouterr().err


def test_eval_version_mismatch_names_versions(trained, tmp_path, capsys):
    blob = bytearray((trained / "checkpoint_final.qfc").read_bytes())
    blob[:8] = b"QFCHKPT2"
    bad = tmp_path / "vers.qfc"
    bad.write_bytes(bytes(blob))
    rc = main(["eval", "--checkpoint", str(bad), "--eval-seed", "1"])
    err = capsys.readouterr().err
    assert rc == 2 and "QFCHKPT1" in err and "QFCHKPT2" in err


# ---------------------------------------------------------------------------
# visualize command

def read_pgm(path):
    blob = pathlib.Path(path).read_bytes()
    assert blob.startswith(b"P5\n")
    header, rest = blob.split(b"255\n", 1)
    dims = header.split(b"\n")[1].split()
    w, h = int(dims[0]), int(dims[1])
    assert len(rest) == w * h
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def test_write_pgm_uniform_saturates():
    path = "/tmp/qf_test_uniform.pgm"
    write_pgm(path, np.ones((3, 5)))
    pixels = read_pgm(path)
    assert pixels.shape == (3, 5)
    assert np.all(pixels == 255)


def test_visualize_writes_levels_with_grid_dims(trained, tmp_path):
    rc = main(["visualize", "--checkpoint", str(trained / "checkpoint_final.qfc"),
               "--scene-seed", "2", "--layer", "1", "--query", "3",
               "--out", str(tmp_path / "viz")])
    assert rc == 0
    files = sorted((tmp_path / "viz").glob("*.pgm"))
    assert [f.name for f in files] == ["attn_L1_Q3_S0.pgm"]
    assert read_pgm(files[0]).shape == (4, 4)  # 8x8 grid, low-res level


def test_visualize_bytes_stable(trained, tmp_path):
    args = ["visualize", "--checkpoint", str(trained / "checkpoint_final.qfc"),
            "--scene-seed", "2", "--layer", "0", "--query", "1"]
    assert main(args + ["--out", str(tmp_path / "v1")]) == 0
    assert main(args + ["--out", str(tmp_path / "v2")]) == 0
    f1 = (tmp_path / "v1" / "attn_L0_Q1_S0.pgm").read_bytes()
    f2 = (tmp_path / "v2" / "attn_L0_Q1_S0.pgm").read_bytes()
    assert f1 == f2


def test_visualize_out_of_range_indices(trained, tmp_path, capsys):
    rc = main(["visualize", "--checkpoint", str(trained / "checkpoint_final.qfc"),
               "--scene-seed", "2", "--layer", "9", "--query", "0",
               "--out", str(tmp_path / "viz")])
    assert rc == 2
    assert "layer" in capsys.readouterr().err
