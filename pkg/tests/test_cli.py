import csv
import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from ossi_kit.cli import EXIT_CONFIG, EXIT_INPUT, EXIT_OK, EXIT_RUNTIME, EXIT_SOLVER, main
from ossi_kit.config import RECON_METHODS
from ossi_kit.ost import read_ost

SMALL = {
    "phantom": {"nx": 24, "ny": 24, "t_s": 20},
    "sampling": {"accel": 4.0, "center_lines": 4},
    "dictionary": {"r2s_hz": {"start": 12.0, "stop": 38.0, "step": 1.0},
                   "f0_hz": {"start": -33.3, "stop": 33.3, "step": 1.0}},
}


def _write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def _hashes(d):
    return {n: hashlib.sha256((d / n).read_bytes()).hexdigest() for n in sorted(os.listdir(d))
            if n != "manifest.json"}


def _metrics(path):
    with open(path, newline="") as fh:
        return {r["metric"]: r["value"] for r in csv.DictReader(fh)}


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = _write_cfg(root / "small.json", dict(SMALL, output_dir=str(root / "out")))
    codes = [main([stage, "--config", cfg]) for stage in ("phantom", "sample")]
    codes.append(main(["recon", "--config", cfg, "--method", "tensor-lr"]))
    codes.append(main(["analyze", "--config", cfg, "--method", "tensor-lr"]))
    return root, cfg, codes


def test_end_to_end_pipeline(pipeline_run):
    root, _, codes = pipeline_run
    assert codes == [EXIT_OK] * 4
    out = root / "out"
    images = read_ost(out / "recon" / "tensor-lr" / "images.ost")
    assert images.shape == (24, 24, 10, 20) and images.dtype == np.complex64
    m = _metrics(out / "analyze" / "tensor-lr" / "metrics.csv")
    assert {"nrmsd_after", "nrmsd_before", "auc", "tsnr_db"} <= set(m)
    assert 0 < float(m["nrmsd_after"]) < float(m["nrmsd_after_zero_filled"])
    assert 0.5 < float(m["auc"]) <= 1.0
    for png in ("magnitude.png", "activation.png", "tsnr.png", "correlation.png"):
        assert (out / "analyze" / "tensor-lr" / png).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_manifest_contents(pipeline_run):
    root, _, _ = pipeline_run
    man = json.loads((root / "out" / "recon" / "tensor-lr" / "manifest.json").read_text())
    assert man["command"] == ["recon"]
    assert man["config"]["solver"]["method"] == "tensor-lr"
    # every default is present in the stored config
    assert man["config"]["solver"]["admm"]["rho"] == 121.0
    assert any(p.endswith("kspace.ost") for p in man["inputs"])
    assert "images.ost" in man["outputs"] and man["wall_time_s"] >= 0


def test_replay_identical_across_threads(pipeline_run, capsys):
    root, _, _ = pipeline_run
    d = root / "out" / "recon" / "tensor-lr"
    before = _hashes(d)
    assert main(["replay", str(d / "manifest.json"), "--threads", "2"]) == EXIT_OK
    assert "replay identical" in capsys.readouterr().out
    assert _hashes(d) == before
    man = json.loads((d / "manifest.json").read_text())
    assert man["threads"] == 2


def test_replay_changed_input(pipeline_run, tmp_path):
    root, _, _ = pipeline_run
    src = root / "out" / "analyze" / "tensor-lr" / "manifest.json"
    man = json.loads(src.read_text())
    victim = next(p for p in man["inputs"] if p.endswith("reference.csv"))
    copy = tmp_path / "reference.csv"
    copy.write_text(open(victim).read() + "\n")
    man["inputs"] = {str(copy) if p == victim else p: h for p, h in man["inputs"].items()}
    m2 = tmp_path / "manifest.json"
    m2.write_text(json.dumps(man))
    assert main(["replay", str(m2), "--out", str(tmp_path / "o")]) == EXIT_INPUT


def test_replay_detects_output_change(pipeline_run, tmp_path):
    root, _, _ = pipeline_run
    src = root / "out" / "analyze" / "tensor-lr" / "manifest.json"
    man = json.loads(src.read_text())
    man["outputs"]["metrics.csv"] = "0" * 64
    m2 = tmp_path / "manifest.json"
    m2.write_text(json.dumps(man))
    assert main(["replay", str(m2), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME


def test_simulate_outputs_and_seed(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--out", str(a), "--seed", "7"]) == EXIT_OK
    assert main(["simulate", "--out", str(b), "--seed", "7"]) == EXIT_OK
    assert _hashes(a / "simulate") == _hashes(b / "simulate")
    with open(a / "simulate" / "cycle.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    mag = np.array([float(r["magnitude"]) for r in rows])
    assert mag.mean() > float(rows[0]["gre_ernst"])
    assert json.loads((a / "simulate" / "duality.json").read_text())["passed"]


def test_phantom_seed_reproducible(tmp_path):
    cfg = _write_cfg(tmp_path / "c.json", SMALL)
    for name in ("x", "y"):
        assert main(["phantom", "--config", cfg, "--out", str(tmp_path / name),
                     "--seed", "3"]) == EXIT_OK
        assert main(["sample", "--config", cfg, "--out", str(tmp_path / name),
                     "--seed", "3"]) == EXIT_OK
    assert _hashes(tmp_path / "x" / "sample") == _hashes(tmp_path / "y" / "sample")


def test_dict_build_and_match(pipeline_run, tmp_path):
    root, cfg, _ = pipeline_run
    out = root / "out"
    assert main(["dict", "build", "--config", cfg, "--out", str(out)]) == EXIT_OK
    atoms = read_ost(out / "dict" / "dictionary.ost")
    assert atoms.shape == (10, 27 * 67)
    assert main(["dict", "match", "--config", cfg, "--out", str(out),
                 "--dict", str(out / "dict")]) == EXIT_OK
    r2s = read_ost(out / "dict-match" / "r2s.ost")
    assert r2s.shape == (24, 24, 20)


def test_empty_config_exit_2(tmp_path, capsys):
    p = tmp_path / "empty.json"
    p.write_text("")
    assert main(["simulate", "--config", str(p)]) == EXIT_CONFIG
    assert "empty" in capsys.readouterr().err
    p.write_text("{}")
    assert main(["simulate", "--config", str(p)]) == EXIT_CONFIG


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.json", {"phantom": {"size": 3}})
    assert main(["phantom", "--config", cfg]) == EXIT_CONFIG
    assert "phantom" in capsys.readouterr().err


def test_unknown_method_lists_choices(capsys):
    assert main(["recon", "--method", "magic"]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "usage" in err
    for m in RECON_METHODS:
        assert m in err


def test_missing_inputs_exit_4(tmp_path, capsys):
    assert main(["sample", "--out", str(tmp_path), "--phantom", str(tmp_path / "none")]) \
        == EXIT_INPUT
    assert "error" in capsys.readouterr().err
    assert main(["phantom", "--config", str(tmp_path / "nope.json")]) == EXIT_INPUT
    assert main(["replay", str(tmp_path / "nope.json")]) == EXIT_INPUT


def test_analyze_shape_mismatch_exit_4(pipeline_run, tmp_path, capsys):
    root, _, _ = pipeline_run
    other = _write_cfg(tmp_path / "o.json", {"phantom": {"nx": 16, "ny": 16, "t_s": 20}})
    assert main(["phantom", "--config", other, "--out", str(tmp_path)]) == EXIT_OK
    capsys.readouterr()
    code = main(["analyze", "--config", other, "--out", str(tmp_path),
                 "--recon", str(root / "out" / "recon" / "tensor-lr")])
    assert code == EXIT_INPUT
    err = capsys.readouterr().err
    assert "(24, 24, 10, 20)" in err and "(16, 16, 10, 20)" in err


def test_solver_divergence_exit_5(pipeline_run, tmp_path, capsys):
    root, _, _ = pipeline_run
    cfg = dict(SMALL, solver={"cgsense": {"reg": "quadratic", "alpha": 1000.0, "iters": 50}})
    path = _write_cfg(tmp_path / "d.json", cfg)
    code = main(["recon", "--config", path, "--method", "cgsense", "--out", str(tmp_path),
                 "--sample", str(root / "out" / "sample")])
    assert code == EXIT_SOLVER
    body = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert body["error"] == "SolverDivergenceError" and len(body["trace"]) > 5
    saved = json.loads((tmp_path / "recon" / "cgsense" / "error.json").read_text())
    assert saved == body


def test_bad_flags(capsys):
    assert main(["phantom", "--threads", "0"]) == EXIT_CONFIG
    assert main(["phantom", "--seed", "-1"]) == EXIT_CONFIG
    assert main([]) == EXIT_CONFIG
    capsys.readouterr()


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "ossi_kit.cli", "--help"], capture_output=True,
                       text=True, check=False)
    assert r.returncode == 0
    for stage in ("simulate", "dict", "phantom", "sample", "recon", "analyze", "replay"):
        assert stage in r.stdout
