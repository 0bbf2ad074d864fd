import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from smf.cli import main
from smf.io import read_dataset


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def synth_dir(tmp_path):
    spec = _write(tmp_path / "spec.json", {"p": 8, "q": 2, "n": 40, "r": 2, "kappa": 2,
                                           "variant": "feature", "seed": 3})
    assert main(["synth", "--config", spec, "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


@pytest.fixture
def train_cfg(tmp_path):
    return _write(tmp_path / "cfg.json", {"variant": "feature", "xi": 1.0, "lambda": 1.0,
                                          "tau": 0.05, "rank": 2, "max_iters": 60})


class TestSynth:
    def test_files_and_shapes(self, synth_dir):
        data = read_dataset(synth_dir)
        assert (data.p, data.q, data.n, data.kappa) == (8, 2, 40, 2)
        man = json.loads((synth_dir / "truth" / "manifest.json").read_text())
        assert man["variant"] == "feature"
        assert np.loadtxt(synth_dir / "truth" / "theta_star.csv", delimiter=",").shape == (10, 40)

    def test_byte_identical(self, tmp_path, synth_dir):
        spec = tmp_path / "spec.json"
        assert main(["synth", "--config", str(spec), "--out", str(tmp_path / "again")]) == 0
        for name in ("x_data.csv", "labels.csv", "x_aux.csv", "truth/theta_star.csv"):
            assert (synth_dir / name).read_bytes() == (tmp_path / "again" / name).read_bytes()

    def test_rank_too_large(self, tmp_path, capsys):
        spec = _write(tmp_path / "bad.json", {"p": 3, "q": 0, "n": 10, "r": 5, "kappa": 1})
        assert main(["synth", "--config", spec, "--out", str(tmp_path / "o")]) == 2
        assert "r:" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_semi_synthetic(self, tmp_path):
        spec = _write(tmp_path / "s.json", {"kind": "semi_synthetic", "seed": 1, "n": 30})
        assert main(["synth", "--config", spec, "--out", str(tmp_path / "o")]) == 0
        data = read_dataset(tmp_path / "o")
        assert data.x_data.shape == (784, 30) and data.kappa == 1

    def test_unknown_kind(self, tmp_path):
        spec = _write(tmp_path / "s.json", {"kind": "mnist"})
        assert main(["synth", "--config", spec, "--out", str(tmp_path / "o")]) == 2


class TestTrain:
    def test_outputs_and_reference(self, tmp_path, synth_dir, train_cfg):
        out = tmp_path / "model"
        rc = main(["train", "--data", str(synth_dir), "--config", train_cfg, "--out", str(out),
                   "--ref", str(synth_dir / "truth" / "manifest.json")])
        assert rc == 0
        for name in ("w.csv", "h.csv", "beta.csv", "gamma.csv", "trace.jsonl", "config.json",
                     "summary.json", "factors.json"):
            assert (out / name).exists(), name
        summary = json.loads((out / "summary.json").read_text())
        assert "rho_estimate" in summary
        assert {"mu", "l", "ok", "rho_for_tau"} <= set(summary["diagnostics"])
        first = json.loads((out / "trace.jsonl").read_text().splitlines()[0])
        assert first["dist_to_ref"] is not None

    def test_bcd_trace_non_increasing(self, tmp_path, synth_dir, train_cfg):
        out = tmp_path / "m"
        assert main(["train", "--data", str(synth_dir), "--config", train_cfg, "--out", str(out),
                     "--optimizer", "bcd"]) == 0
        obj = [json.loads(line)["objective"] for line in (out / "trace.jsonl").read_text().splitlines()]
        assert np.all(np.diff(obj) <= 1e-9 * np.abs(obj[1:]))

    def test_rerun_identical_summary(self, tmp_path, synth_dir, train_cfg):
        outs = []
        for name in ("a", "b"):
            assert main(["--threads", "1", "train", "--data", str(synth_dir), "--config", train_cfg,
                         "--out", str(tmp_path / name)]) == 0
            s = json.loads((tmp_path / name / "summary.json").read_text())
            s.pop("elapsed_seconds")
            outs.append(s)
        assert outs[0] == outs[1]
        assert (tmp_path / "a" / "w.csv").read_bytes() == (tmp_path / "b" / "w.csv").read_bytes()

    def test_missing_data(self, tmp_path, train_cfg):
        assert main(["train", "--data", str(tmp_path / "none"), "--config", train_cfg,
                     "--out", str(tmp_path / "o")]) == 3

    def test_bad_config(self, tmp_path, synth_dir):
        cfg = _write(tmp_path / "c.json", {"variant": "feature", "tau": -1})
        assert main(["train", "--data", str(synth_dir), "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_divergence_exit_code(self, tmp_path, synth_dir):
        cfg = _write(tmp_path / "c.json", {"variant": "feature", "xi": 1.0, "tau": 100.0,
                                           "max_iters": 500})
        with np.errstate(all="ignore"):
            rc = main(["train", "--data", str(synth_dir), "--config", cfg, "--out", str(tmp_path / "o")])
        assert rc == 4
        assert not (tmp_path / "o").exists()

    def test_reference_variant_mismatch(self, tmp_path, synth_dir):
        cfg = _write(tmp_path / "c.json", {"variant": "filter", "max_iters": 2})
        assert main(["train", "--data", str(synth_dir), "--config", cfg, "--out", str(tmp_path / "o"),
                     "--ref", str(synth_dir / "truth")]) == 2


class TestPredictDiagnoseCv:
    @pytest.mark.parametrize("method", ["heuristic", "full"])
    def test_predict(self, tmp_path, synth_dir, train_cfg, method):
        assert main(["train", "--data", str(synth_dir), "--config", train_cfg,
                     "--out", str(tmp_path / "m")]) == 0
        assert main(["predict", "--model", str(tmp_path / "m"), "--data", str(synth_dir),
                     "--out", str(tmp_path / "p"), "--method", method]) == 0
        with (tmp_path / "p" / "predictions.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 40 and set(rows[0]) == {"sample", "label", "p0", "p1", "p2"}
        metrics = json.loads((tmp_path / "p" / "metrics.json").read_text())
        assert 0.0 <= metrics["accuracy"] <= 1.0 and metrics["method"] == method

    def test_diagnose(self, tmp_path, synth_dir, train_cfg, capsys):
        assert main(["diagnose", "--data", str(synth_dir), "--config", train_cfg, "--m-bound", "0"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["m_bound"] == 0.0 and report["mu"] == pytest.approx(2.0)
        assert main(["diagnose", "--data", str(synth_dir), "--config", train_cfg,
                     "--out", str(tmp_path / "d"), "--ref", str(synth_dir / "truth")]) == 0
        sv = np.loadtxt(tmp_path / "d" / "singular_values.csv", delimiter=",")
        assert sv.shape == (8,) and np.all(np.diff(sv) <= 0)

    def test_cv(self, tmp_path, synth_dir, train_cfg):
        assert main(["cv", "--data", str(synth_dir), "--config", train_cfg, "--out", str(tmp_path / "cv"),
                     "--folds", "3", "--xis", "0.1,1", "--lams", "1", "--auto-tau"]) == 0
        lines = (tmp_path / "cv" / "cv.csv").read_text().splitlines()
        assert lines[0] == "config,fold,accuracy" and len(lines) == 1 + 2 * 3
        summary = json.loads((tmp_path / "cv" / "cv_summary.json").read_text())
        assert [c["xi"] for c in summary["configs"]] == [0.1, 1.0]


def test_benchmark_small_protocol(tmp_path):
    proto = _write(tmp_path / "proto.json", {"xis": [1.0, 5.0], "repeats": 2, "max_iters": 6,
                                             "p": 64, "n": 40})
    assert main(["benchmark", "--config", proto, "--out", str(tmp_path / "b")]) == 0
    traces = sorted(p.name for p in (tmp_path / "b" / "traces").iterdir())
    assert len(traces) == 2 * 2 * 2
    with (tmp_path / "b" / "aggregate.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 * 6
    assert set(rows[0]) == {"xi", "optimizer", "iter", "mean_loss", "std_loss"}
    summary = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert summary["runs"] == 8


def test_benchmark_unknown_key(tmp_path):
    proto = _write(tmp_path / "proto.json", {"xi": [1.0]})
    assert main(["benchmark", "--config", proto, "--out", str(tmp_path / "b")]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "smf.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("synth", "train", "predict", "diagnose", "cv", "benchmark"):
        assert cmd in proc.stdout
