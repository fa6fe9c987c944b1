import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from rsavq.cli import build_parser, main
from rsavq.tensorio import GradientBundle, read_bundle, read_tensor, write_bundle, write_tensor


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def toy(tmp_path):
    out = tmp_path / "toy"
    assert run("gen-toy", "--seed", 0, "-o", out) == 0
    return out


def test_gen_toy_files(toy, tmp_path, capsys):
    names = sorted(p.name for p in toy.iterdir())
    assert names == ["grads.rsqb", "inputs.rsqt", "labels.json", "task.json", "w.rsqt"]
    assert read_tensor(toy / "w.rsqt").shape == (4, 8)
    assert read_bundle(toy / "grads.rsqb").sample_count == 256
    assert len(json.loads((toy / "labels.json").read_text())) == 256
    again = tmp_path / "again"
    run("gen-toy", "--seed", 0, "-o", again)
    for name in names:
        assert (toy / name).read_bytes() == (again / name).read_bytes()
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["M"] == 4 and summary["seed"] == 0


def test_gen_toy_rejects_single_class(tmp_path, capsys):
    assert run("gen-toy", "--m", 1, "-o", tmp_path) == 2
    assert "M >= 2" in capsys.readouterr().err


def test_lossless_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    w = rng.standard_normal((4, 6))
    write_tensor(w, tmp_path / "w.rsqt")
    write_bundle(GradientBundle(rng.standard_normal((8, 4, 6))), tmp_path / "g.rsqb")
    assert run("quantize", "--weights", tmp_path / "w.rsqt", "--grads", tmp_path / "g.rsqb", "--lambda", 0, "-o", tmp_path) == 0
    assert run("dequantize", "--artifact", tmp_path / "artifact.rsqq", "-o", tmp_path) == 0
    np.testing.assert_array_equal(read_tensor(tmp_path / "w_hat.rsqt"), read_tensor(tmp_path / "w.rsqt"))


def test_channel_axis_cols(tmp_path):
    rng = np.random.default_rng(1)
    w = rng.standard_normal((6, 4))
    write_tensor(w, tmp_path / "w.rsqt")
    write_bundle(GradientBundle(rng.standard_normal((8, 6, 4))), tmp_path / "g.rsqb")
    common = ("--channel-axis", "cols", "-o", tmp_path)
    assert run("quantize", "--weights", tmp_path / "w.rsqt", "--grads", tmp_path / "g.rsqb", "--lambda", 0, *common) == 0
    assert run("dequantize", "--artifact", tmp_path / "artifact.rsqq", *common) == 0
    np.testing.assert_array_equal(read_tensor(tmp_path / "w_hat.rsqt"), read_tensor(tmp_path / "w.rsqt"))


def test_missing_grads_names_path(tmp_path, capsys):
    write_tensor(np.ones((2, 2)), tmp_path / "w.rsqt")
    missing = tmp_path / "nope.rsqb"
    assert run("quantize", "--weights", tmp_path / "w.rsqt", "--grads", missing, "-o", tmp_path) == 2
    assert str(missing) in capsys.readouterr().err


def test_analyze_uniform_bundle(tmp_path, capsys):
    row = np.arange(1.0, 7.0)
    samples = np.broadcast_to(row, (5, 4, 6)) * np.arange(1.0, 6.0)[:, None, None]
    write_bundle(GradientBundle(samples), tmp_path / "g.rsqb")
    assert run("analyze", "--grads", tmp_path / "g.rsqb", "--group-count", 2, "-o", tmp_path) == 0
    report = json.loads((tmp_path / "analysis.json").read_text())
    np.testing.assert_allclose(report["energies"], report["energies"][0], rtol=1e-9)
    assert set(report["bits"]) == {2.0}
    assert report["budget"] == 8
    assert [g["channels"] for g in report["groups"]] == [[0, 1], [2, 3]]


def test_ablate_sweep_csv(toy, tmp_path):
    out = tmp_path / "abl"
    code = run(
        "ablate", "--task", toy, "--axis", "lambda", "--values", "0,0.05,0.1",
        "--seeds", "0,1", "--stamp", "x", "--vector-length", 1, "--format", "csv", "-o", out,
    )
    assert code == 0
    rows = list(csv.reader((out / "ablation_lambda_x.csv").open()))
    assert rows[0][0] == "setting" and len(rows) == 4
    assert [float(r[0]) for r in rows[1:]] == [0.0, 0.05, 0.1]
    assert not (out / "ablation_lambda_x.json").exists()


def test_ablate_requires_values(toy, tmp_path, capsys):
    assert run("ablate", "--task", toy, "--axis", "lambda", "--seeds", "0", "-o", tmp_path) == 2
    assert "--values" in capsys.readouterr().err


def test_eval_identity_is_zero(toy, tmp_path):
    w = toy / "w.rsqt"
    assert run("eval", "--weights", w, "--w-hat", w, "--grads", toy / "grads.rsqb", "--task", toy, "-o", tmp_path) == 0
    report = json.loads((tmp_path / "metrics.json").read_text())
    assert set(report.values()) == {0.0}
    assert "loss_delta_holdout" in report


def test_eval_detects_tampered_task(toy, tmp_path):
    write_tensor(np.zeros((4, 8)), toy / "w.rsqt")
    w = toy / "w.rsqt"
    assert run("eval", "--weights", w, "--w-hat", w, "--grads", toy / "grads.rsqb", "--task", toy, "-o", tmp_path) == 2


def test_help_lists_flags(capsys):
    parser = build_parser()
    for cmd, flags in {
        "gen-toy": ["--preset", "--m", "--n", "--samples", "--seed", "--out", "--config", "--channel-axis", "--format"],
        "analyze": ["--grads", "--target-bits", "--group-count", "--rule"],
        "quantize": ["--weights", "--grads", "--vector-length", "--lambda", "--kmeans-iters", "--kmeans-tol", "--metric-mode"],
        "dequantize": ["--artifact"],
        "eval": ["--weights", "--w-hat", "--grads", "--task"],
        "ablate": ["--task", "--axis", "--values", "--seeds", "--stamp"],
    }.items():
        with pytest.raises(SystemExit) as exc:
            parser.parse_args([cmd, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in flags:
            assert flag in text, (cmd, flag)


def test_config_precedence(tmp_path):
    rng = np.random.default_rng(2)
    write_tensor(rng.standard_normal((4, 6)), tmp_path / "w.rsqt")
    write_bundle(GradientBundle(rng.standard_normal((8, 4, 6))), tmp_path / "g.rsqb")
    (tmp_path / "cfg.json").write_text(json.dumps({"vector_length": 3, "group_count": 2, "lambda": 0.2}))
    args = ("quantize", "--weights", tmp_path / "w.rsqt", "--grads", tmp_path / "g.rsqb", "--config", tmp_path / "cfg.json")
    assert run(*args, "--group-count", 1, "-o", tmp_path) == 0
    cfg = json.loads((tmp_path / "profile.json").read_text())["config"]
    assert (cfg["vector_length"], cfg["group_count"], cfg["lambda"]) == (3, 1, 0.2)


def test_bad_config_key(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"bogus": 1}))
    write_tensor(np.ones((2, 2)), tmp_path / "w.rsqt")
    write_bundle(GradientBundle(np.ones((1, 2, 2))), tmp_path / "g.rsqb")
    code = run("quantize", "--weights", tmp_path / "w.rsqt", "--grads", tmp_path / "g.rsqb", "--config", tmp_path / "cfg.json")
    assert code == 2
    assert "bogus" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    env = dict(os.environ, RSAVQ_THREADS="1")
    proc = subprocess.run(
        [sys.executable, "-m", "rsavq.cli", "gen-toy", "--seed", "5", "-o", str(tmp_path)],
        capture_output=True, text=True, env=env,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["seed"] == 5
