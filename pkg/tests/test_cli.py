import csv
import json

import numpy as np
import pytest

from ntklab import cli
from ntklab.experiment import (EXIT_CONFIG, EXIT_DIVERGED, EXIT_NONSEPARABLE, EXIT_OK, ConfigError,
                               ExperimentConfig, load_config, loglog_slope, resolve, run_experiment)

SMALL = """
seed = 1
[data]
n = 40
d = 3
margin_floor = 0.3
[model]
activation = "tanh"
m = 200
[train]
eta = 0.05
T = 60
log_every = 20
gammas = [0.5]
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def test_run_writes_report_files(small_cfg, tmp_path, capsys):
    code = cli.main(["run", str(small_cfg), "--out", str(tmp_path / "out")])
    assert code == EXIT_OK
    runs = list((tmp_path / "out").iterdir())
    assert len(runs) == 1
    names = {p.name for p in runs[0].iterdir()}
    assert names == {"manifest.json", "certificate.json", "trajectory.csv", "bounds.json", "bounds.txt",
                     "trajectory.png", "bounds.png", "result.json"}
    rows = list(csv.DictReader((runs[0] / "trajectory.csv").open()))
    assert [int(r["t"]) for r in rows] == [0, 20, 40, 60]
    bounds = json.loads((runs[0] / "bounds.json").read_text())
    assert {"lhs", "rhs", "slack", "holds", "inputs"} <= set(bounds[0])
    assert (runs[0] / "trajectory.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    out = capsys.readouterr().out
    assert "verdict" in out and "all checks hold" in out


def test_manifest_rerun_is_identical(small_cfg, tmp_path):
    first = run_experiment(load_config(small_cfg), tmp_path / "a")
    again = run_experiment(load_config(first.out_dir / "manifest.json"), tmp_path / "b")
    assert first.out_dir.name == again.out_dir.name
    for p in first.out_dir.iterdir():
        assert p.read_bytes() == (again.out_dir / p.name).read_bytes(), p.name


def test_seed_override_changes_run(small_cfg, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", str(small_cfg), "--out", str(out), "--seed", "2"]) == EXIT_OK
    assert cli.main(["run", str(small_cfg), "--out", str(out), "--seed", "3"]) == EXIT_OK
    assert len(list(out.iterdir())) == 2


@pytest.mark.parametrize("text, field", [
    ("[train]\neta = -1.0\n", "eta"),
    ("[model]\nm = 7\n", "'m'"),
    ("[model]\nactivation = \"relu\"\n", "activation"),
    ("[train]\nT = \"many\"\n", "'T'"),
    ("bogus = 1\n", "bogus"),
    ("corollary = \"cor6\"\n", "epsilon"),
    ("[data]\nn = 5\n[model]\nn = 6\n", "given twice"),
])
def test_config_errors_name_the_field(tmp_path, capsys, text, field):
    p = tmp_path / "bad.toml"
    p.write_text(text)
    assert cli.main(["run", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert field in capsys.readouterr().err


def test_missing_and_malformed_config(tmp_path):
    with pytest.raises(ConfigError, match="No such file"):
        load_config(tmp_path / "missing.toml")
    (tmp_path / "x.toml").write_text("[[[")
    with pytest.raises(ConfigError, match="invalid"):
        load_config(tmp_path / "x.toml")
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"n": 10, "m": 20}))
    assert load_config(p).m == 20


def test_config_round_trip():
    cfg = ExperimentConfig.from_dict({"n": 10, "gammas": [0.2, 0.4], "m": 30})
    assert ExperimentConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    assert cfg.replace(seed=5).seed == 5 and cfg.seed == 0
    with pytest.raises(ConfigError):
        cfg.replace(m=31)


def _csv(tmp_path, name, rows):
    p = tmp_path / name
    p.write_text("x0,x1,y\n" + "".join(f"{a},{b},{y}\n" for a, b, y in rows))
    return p


def test_conflicting_labels_exit_nonseparable(tmp_path, capsys):
    data = _csv(tmp_path, "conflict.csv", [(0.5, 0.1, 1), (0.5, 0.1, -1), (-0.2, 0.3, 1)])
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'data = "{data}"\nm = 20\neta = 0.1\nT = 5\n')
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_NONSEPARABLE
    assert "not separated" in capsys.readouterr().out
    assert cli.main(["certify", str(data), "--m", "20", "--out", str(tmp_path / "o")]) == EXIT_NONSEPARABLE


def test_divergence_exit(tmp_path):
    data = _csv(tmp_path, "d.csv", [(0.6, 0.0, 1), (0.3, 0.0, -1)])
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'data = "{data}"\nactivation = "identity"\nm = 10\neta = 10000.0\nT = 10\n'
                   'certify = false\nrho = 0.1\n')
    res = run_experiment(load_config(cfg), tmp_path / "o")
    assert res.exit_code == EXIT_DIVERGED
    assert json.loads((res.out_dir / "result.json").read_text())["exit_code"] == EXIT_DIVERGED
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_DIVERGED


def test_empty_sweep(small_cfg, tmp_path, capsys):
    assert cli.main(["sweep", str(small_cfg), "--axis", "T", "--values", "", "--out", str(tmp_path / "o")]) == EXIT_OK
    (sweep_dir,) = (tmp_path / "o").iterdir()
    lines = (sweep_dir / "summary.csv").read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("T,exit_code")


def test_sweep_rows_and_figure(small_cfg, tmp_path):
    assert cli.main(["sweep", str(small_cfg), "--axis", "T", "--values", "20,80",
                     "--out", str(tmp_path)]) == EXIT_OK
    (sweep_dir,) = [p for p in tmp_path.iterdir() if p.name.startswith("sweep-")]
    rows = list(csv.DictReader((sweep_dir / "summary.csv").open()))
    assert [r["T"] for r in rows] == ["20", "80"] and all(r["exit_code"] == "0" for r in rows)
    assert (sweep_dir / "sweep.png").exists()
    summary = json.loads((sweep_dir / "summary.json").read_text())
    assert summary["values"] == [20, 80]


def test_sweep_rejects_non_numeric_axis(small_cfg, tmp_path):
    assert cli.main(["sweep", str(small_cfg), "--axis", "activation", "--values", "1",
                     "--out", str(tmp_path)]) == EXIT_CONFIG
    assert cli.main(["sweep", str(small_cfg), "--axis", "T", "--values", "1,x",
                     "--out", str(tmp_path)]) == EXIT_CONFIG


def test_generate_certify_gram(tmp_path, capsys):
    data = tmp_path / "d.csv"
    assert cli.main(["generate", str(data), "--n", "30", "--d", "3", "--margin-floor", "0.3",
                     "--seed", "4"]) == EXIT_OK
    meta = json.loads((tmp_path / "d.csv.json").read_text())
    assert meta["seed"] == 4
    capsys.readouterr()
    assert cli.main(["certify", str(data), "--m", "200", "--out", str(tmp_path / "o")]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["rho_hat"] > 0
    (cdir,) = (tmp_path / "o").iterdir()
    assert {p.name for p in cdir.iterdir()} == {"certificate.json", "directions.csv"}
    for kernel in ("ntk", "empirical"):
        assert cli.main(["gram", str(data), "--kernel", kernel, "--samples", "2000", "--m", "100",
                         "--out", str(tmp_path / "g")]) == EXIT_OK
    for gdir in (tmp_path / "g").iterdir():
        summary = json.loads((gdir / "gram.json").read_text())
        assert summary["n"] == 30 and summary["min_eigenvalue"] > 0
        assert (gdir / "gram.png").exists() and (gdir / "gram.csv").exists()


def test_bad_csv_is_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x0,x1,y\n2.0,0.0,1\n")
    assert cli.main(["certify", str(bad)]) == EXIT_CONFIG
    assert "norm" in capsys.readouterr().err


def test_resolve_auto_width_fixed_point(tmp_path):
    cfg = ExperimentConfig.from_dict({"n": 40, "d": 3, "margin_floor": 0.4, "max_T": 10})
    res = resolve(cfg)
    assert res.cert.rho_hat > 0 and res.T <= 10
    last = res.width_history[-1]
    assert last["m"] == res.m


def test_threads_env(monkeypatch):
    from ntklab.experiment import threads_from_env
    monkeypatch.setenv("NTKLAB_THREADS", "3")
    assert threads_from_env() == 3
    monkeypatch.setenv("NTKLAB_THREADS", "x")
    with pytest.raises(ConfigError):
        threads_from_env()


def test_loglog_slope():
    x = np.array([1.0, 10.0, 100.0])
    assert loglog_slope(x, 3 * x**-1.0) == pytest.approx(-1.0)
    assert np.isnan(loglog_slope([1.0], [1.0]))
