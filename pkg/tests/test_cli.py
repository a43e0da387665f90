import json
import subprocess
import sys

import numpy as np
import pytest

from hypoips import experiment as ex
from hypoips.cli import EXIT_ALL_FAILED, EXIT_CONFIG, EXIT_OK, main
from hypoips.errors import BlowupError, ConfigError

SMALL = {
    "model": "ilangevin1d",
    "design": {"N": 4, "n": 40, "T": 0.4, "fine_step": 0.002},
    "replicates": 3,
    "methods": ["LG", "EM"],
    "modes": ["complete", "partial"],
    "adam": {"iterations": 30},
    "seed": 7,
}


def write_config(tmp_path, **changes):
    cfg = {**SMALL, **changes}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_config_defaults_and_roundtrip():
    cfg = ex.ExperimentConfig.from_dict(SMALL)
    assert cfg.theta_true == (2.0, 1.5, 2.0, 0.5)
    assert cfg.partial_coords == (0,)
    assert cfg.adam["complete"]["iterations"] == 30
    assert ex.ExperimentConfig.from_json(cfg.to_json()) == cfg
    assert cfg.with_seed(9).seed == 9


def test_paper_optimizer_defaults():
    cfg = ex.ExperimentConfig.from_dict({"model": "ifhn", "replicates": 1,
                                        "design": {"N": 2, "n": 10, "T": 0.1}})
    assert cfg.adam["complete"]["step_size"] == 0.01 and cfg.adam["complete"]["iterations"] == 8000
    assert cfg.adam["partial"]["step_size"] == 0.005 and cfg.adam["partial"]["iterations"] == 5000


@pytest.mark.parametrize("bad", [
    {"model": "nope"},
    {"theta_true": [1.0, 2.0]},
    {"methods": ["XX"]},
    {"modes": ["sideways"]},
    {"design": {"N": 4, "n": 40, "T": 0.4, "fine_step": 0.003}},
    {"unknown_key": 1},
    {"bounds_margin": 1.0},
    {"adam": {"step_size": -1}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        ex.ExperimentConfig.from_dict({**SMALL, **bad})


def test_bad_config_exit_code(tmp_path, capsys):
    path = write_config(tmp_path, model="nope")
    assert main(["experiment", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert main(["experiment", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_simulate_writes_datasets(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in out.glob("rep*.csv")) == ["rep0.csv", "rep1.csv", "rep2.csv"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["failures"] == 0 and len(manifest["replicates"]) == 3


def test_simulate_zero_replicates(tmp_path):
    cfg = write_config(tmp_path, replicates=0)
    out = tmp_path / "sim0"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert not list(out.glob("rep*.csv"))
    assert json.loads((out / "manifest.json").read_text())["replicates"] == []


def test_experiment_outputs_and_summary_regeneration(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "exp"
    assert main(["experiment", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    for name in ("estimates.csv", "timings.csv", "summary.json", "boxplot.csv", "config.json", "manifest.json"):
        assert (out / name).exists()
    params, rows = ex.read_estimates(out / "estimates.csv")
    assert params == ["lambda", "gamma", "kappa", "sigma"]
    assert len(rows) == 3 * 2 * 2 and all(r["status"] == "ok" for r in rows)
    assert [(r["replicate"], r["method"], r["mode"]) for r in rows[:4]] == [
        (0, "LG", "complete"), (0, "LG", "partial"), (0, "EM", "complete"), (0, "EM", "partial")]
    # summary.json can be rebuilt from estimates.csv alone
    regenerated = ex.summary_json_text(ex.summarize(params, rows))
    assert regenerated == (out / "summary.json").read_text()
    echoed = ex.load_config(out / "config.json")
    assert echoed == ex.load_config(cfg)
    assert "wall_seconds" in (out / "timings.csv").read_text().splitlines()[0]
    assert "seconds" not in (out / "estimates.csv").read_text().splitlines()[0]


def test_experiment_is_deterministic(tmp_path):
    cfg = write_config(tmp_path, modes=["complete"])
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["experiment", "--config", str(cfg), "--out", str(a)]) == EXIT_OK
    assert main(["experiment", "--config", str(cfg), "--out", str(b), "--workers", "2"]) == EXIT_OK
    assert (a / "estimates.csv").read_bytes() == (b / "estimates.csv").read_bytes()
    c = tmp_path / "c"
    assert main(["experiment", "--config", str(cfg), "--out", str(c), "--seed", "8"]) == EXIT_OK
    assert (a / "estimates.csv").read_bytes() != (c / "estimates.csv").read_bytes()


def test_experiment_from_simulated_data(tmp_path):
    cfg = write_config(tmp_path, modes=["complete"], replicates=2)
    sim, inline, loaded = tmp_path / "sim", tmp_path / "inline", tmp_path / "loaded"
    assert main(["simulate", "--config", str(cfg), "--out", str(sim)]) == EXIT_OK
    assert main(["experiment", "--config", str(cfg), "--out", str(inline)]) == EXIT_OK
    assert main(["experiment", "--config", str(cfg), "--out", str(loaded), "--data", str(sim)]) == EXIT_OK
    assert (inline / "estimates.csv").read_bytes() == (loaded / "estimates.csv").read_bytes()


def test_failed_replicate_is_recorded(tmp_path, monkeypatch):
    real = ex.simulate_ips

    def flaky(model, theta, design, replicate=0, **kw):
        if replicate == 1:
            raise BlowupError("forced", time=0.1, particle=0)
        return real(model, theta, design, replicate=replicate, **kw)

    monkeypatch.setattr(ex, "simulate_ips", flaky)
    cfg = write_config(tmp_path, modes=["complete"])
    out = tmp_path / "exp"
    assert main(["experiment", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    _, rows = ex.read_estimates(out / "estimates.csv")
    status = {(r["replicate"], r["method"]): r["status"] for r in rows}
    assert status[(1, "LG")] == "failed:BlowupError" and status[(0, "LG")] == "ok"
    assert np.isnan([r["theta_hat"] for r in rows if r["replicate"] == 1]).all()
    summary = json.loads((out / "summary.json").read_text())
    assert all(e["failures"] == 1 for e in summary["entries"])
    assert json.loads((out / "manifest.json").read_text())["failures"] == 2


def test_all_failed_exit_code(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise BlowupError("forced")

    monkeypatch.setattr(ex, "simulate_ips", boom)
    cfg = write_config(tmp_path, modes=["complete"], replicates=2)
    assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_ALL_FAILED


def test_estimate_command(tmp_path):
    cfg = write_config(tmp_path, modes=["complete"])
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg), "--out", str(sim)]) == EXIT_OK
    out = tmp_path / "est"
    assert main(["estimate", "--config", str(cfg), "--out", str(out), "--data", str(sim / "rep2.csv")]) == EXIT_OK
    result = json.loads((out / "estimate.json").read_text())
    assert [r["replicate"] for r in result["estimates"]] == [2, 2]
    assert main(["estimate", "--config", str(cfg), "--out", str(out), "--data", str(sim / "nope.csv")]) == EXIT_CONFIG


def test_asymptotics_command(tmp_path):
    cfg = write_config(tmp_path, modes=["complete"], methods=["LG"], replicates=10, mc_replicas=2)
    exp = tmp_path / "exp"
    assert main(["experiment", "--config", str(cfg), "--out", str(exp)]) == EXIT_OK
    out = tmp_path / "asy"
    assert main(["asymptotics", "--config", str(cfg), "--out", str(out),
                 "--estimates", str(exp / "estimates.csv")]) == EXIT_OK
    report = json.loads((out / "asymptotics.json").read_text())
    assert report["config"] == ex.load_config(cfg).to_dict()
    assert report["precision"]["gamma"]["beta"][0][0] == pytest.approx(4 * 0.4 / 0.25, rel=1e-9)
    assert set(report["clt"]["LG/complete"]["blocks"]) == {"alpha_R", "beta"}
    assert main(["asymptotics", "--config", str(cfg), "--out", str(out),
                 "--estimates", str(tmp_path / "missing.csv")]) == EXIT_CONFIG


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path, replicates=1)
    proc = subprocess.run([sys.executable, "-m", "hypoips", "simulate", "--config", str(cfg), "--out",
                           str(tmp_path / "s")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "hypoips", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2
