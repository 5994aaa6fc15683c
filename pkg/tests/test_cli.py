from __future__ import annotations

import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from elastoray.cli import dispatch
from elastoray.medium import canonical_config_path
from elastoray.sgf import read_sgf

CONFIG = str(canonical_config_path())


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_no_args_usage(capsys):
    assert dispatch([]) == 1
    assert "usage" in capsys.readouterr().err


def test_console_script_no_args():
    proc = subprocess.run([sys.executable, "-m", "elastoray.cli"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["trace", "--config", CONFIG],
    ["trace", "--config", CONFIG, "--x0", "1,2", "--xi0", "0,0,1", "--out", "r.csv"],
    ["fan", "--config", CONFIG, "--seeds", "many", "--out", "f.json"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert dispatch(argv) == 1


def test_missing_config(tmp_path, capsys):
    code = dispatch(["trace", "--config", str(tmp_path / "missing.json"), "--x0", "0,0,0.2", "--xi0", "0,0,1",
                     "--out", str(tmp_path / "ray.csv")])
    assert code == 2
    err = capsys.readouterr().err
    assert "missing.json" in err and "[config]" in err


def test_build_b_same_model_zero(tmp_path):
    out = tmp_path / "B.sgf"
    assert dispatch(["build-b", "--config1", CONFIG, "--config2", CONFIG, "--out", str(out)]) == 0
    f = read_sgf(out, 6)
    assert f.data.shape == (17, 17, 17, 6) and np.all(f.data == 0)
    man = json.loads((tmp_path / "B.sgf.manifest.json").read_text())
    assert man["command"] == "build-b" and man["outputs"] == [str(out)]
    assert len(man["config_hash"]) == 64 and man["wall_time_s"] >= 0


def test_trace_csv(tmp_path):
    out = tmp_path / "ray.csv"
    assert dispatch(["trace", "--config", CONFIG, "--x0", "0,0,0.2", "--xi0", "0.3,0,1", "--mode", "p",
                     "--sign", "minus", "--step", "1e-3", "--out", str(out)]) == 0
    table = rows(out)
    assert table[0] == ["s", "t", "x", "y", "z", "tau", "xi1", "xi2", "xi3", "divN", "b0"]
    assert float(table[1][10]) == 1.0
    assert float(table[2][5]) < 0  # minus branch


def test_trace_s_mode_has_no_amplitude(tmp_path):
    out = tmp_path / "ray.csv"
    assert dispatch(["trace", "--config", CONFIG, "--x0", "0,0,0.2", "--xi0", "0,0,1", "--mode", "s",
                     "--step", "1e-2", "--out", str(out)]) == 0
    assert rows(out)[1][9] == "nan"


def test_sv_rejects_wrong_components(tmp_path, capsys):
    t = tmp_path / "T.sgf"
    assert dispatch(["eikonal", "--config", CONFIG, "--source", "0,0,0.3", "--out", str(t)]) == 0
    assert dispatch(["sv", "--in", str(t), "--out", str(tmp_path / "W.sgf")]) == 2
    assert "expected 6 components" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    bump = str(Path(__file__).resolve().parents[1] / "configs" / "density_bump.json")
    steps = [
        ["fan", "--config", CONFIG, "--seeds", "8", "--dirs", "16", "--step", "1e-2", "--out", "fan.json"],
        ["build-b", "--config1", bump, "--config2", CONFIG, "--out", "B.sgf"],
        ["sv", "--in", "B.sgf", "--out", "WB.sgf"],
        ["t4", "--config1", bump, "--config2", CONFIG, "--out", "t4.sgf"],
        ["transform", "--in", "B.sgf", "--fan", "fan.json", "--out", "samples.csv"],
        ["invert", "--fan", "fan.json", "--samples", "samples.csv", "--maxiter", "200", "--out", "Bhat.sgf",
         "--diag", "diag.csv"],
        ["certify", "--config", CONFIG, "--fan", "fan.json", "--samples", "samples.csv", "--out", "cert.json"],
        ["trace", "--config", CONFIG, "--x0", "0,0,0.2", "--xi0", "0.3,0,1", "--step", "1e-2", "--out", "ray.csv"],
        ["plot-data", "--ray", "ray.csv", "--samples", "samples.csv", "--diag", "diag.csv", "--cert", "cert.json",
         "--beta", "cert.beta_minus.sgf", "--out-dir", "plots"],
    ]
    import os
    cwd = os.getcwd()
    os.chdir(d)
    try:
        codes = [dispatch(s) for s in steps]
    finally:
        os.chdir(cwd)
    return d, codes


def test_pipeline_exit_codes(pipeline):
    assert pipeline[1] == [0] * 9


def test_pipeline_files(pipeline):
    d, _ = pipeline
    fan = json.loads((d / "fan.json").read_text())
    assert {"config", "spec", "counts", "rays"} <= set(fan)
    samples = rows(d / "samples.csv")
    assert samples[0] == ["ray_id", "value", "length"] and len(samples) - 1 == len(fan["rays"])
    assert read_sgf(d / "WB.sgf", 21).ncomp == 21
    assert read_sgf(d / "Bhat.sgf", 6).ncomp == 6
    cert = json.loads((d / "cert.json").read_text())
    assert cert["verdict"] in ("pass", "fail") and "l2_norm" in cert
    for name in ("fan.json", "B.sgf", "samples.csv", "cert.json", "ray.csv"):
        assert (d / f"{name}.manifest.json").exists()


def test_plot_data_outputs(pipeline):
    d, _ = pipeline
    plots = d / "plots"
    assert len(rows(plots / "ray_xz.csv")) == len(rows(d / "ray.csv"))
    res = rows(plots / "cg_residuals.csv")
    assert res[0] == ["iteration", "residual", "monotone"]
    assert all(r[2] == "1" for r in res[1:])
    cert = rows(plots / "certificate.csv")
    assert len(cert) == 2 and "verdict" in cert[0]
    readme = (plots / "README.md").read_text()
    for name in ("ray_xz.csv", "b0_decay.csv", "samples_hist.csv", "cg_residuals.csv", "beta_slice.csv"):
        assert name in readme


def test_samples_with_missing_rays(pipeline, capsys):
    d, _ = pipeline
    short = d / "short.csv"
    short.write_text("ray_id,value,length\n0,1.0,1.0\n")
    assert dispatch(["invert", "--fan", str(d / "fan.json"), "--samples", str(short), "--out",
                     str(d / "x.sgf")]) == 2
    assert "[samples]" in capsys.readouterr().err
