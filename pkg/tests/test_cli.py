import csv
import json
import subprocess
import sys

import pytest

from mlp_pde.cli import main

CONFIG = {"problem": "heat-cosine", "mode": "convergence", "problem_params": {"d": 1},
          "levels": [1, 2], "replications": 3, "points": [{"t": 0.0, "x": [0.1]}]}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(CONFIG))
    return path


def test_problems_lists_builtins(capsys):
    assert main(["problems"]) == 0
    out = capsys.readouterr().out
    for pid in ("heat-quadratic", "heat-cosine", "manufactured-grad"):
        assert pid in out
    assert "kappa=0.5" in out


def test_run_writes_outputs(config_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(config_file), "--out-dir", str(out)]) == 0
    assert (out / "results.csv").exists() and (out / "run.json").exists()
    side = json.loads((out / "run.json").read_text())
    assert side["config"]["seed"] == 0
    assert "wrote" in capsys.readouterr().out


def test_seed_flag_overrides_config(config_file, tmp_path):
    main(["run", "--config", str(config_file), "--seed", "17", "--out-dir", str(tmp_path / "a")])
    side = json.loads((tmp_path / "a" / "run.json").read_text())
    assert side["config"]["seed"] == 17


def test_threads_flag_keeps_output(config_file, tmp_path):
    for n in (1, 4):
        assert main(["run", "--config", str(config_file), "--threads", str(n),
                     "--out-dir", str(tmp_path / str(n))]) == 0

    def rows(d):
        with open(tmp_path / d / "results.csv", newline="") as fh:
            data = list(csv.reader(fh))
        i = data[0].index("wall_time")
        return [r[:i] for r in data]

    assert rows("1") == rows("4")


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"problem": "heat-cosine",\n "mode": 3,,}')
    assert main(["run", "--config", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err
    unknown = tmp_path / "unknown.toml"
    unknown.write_text('problem = "heat-cosine"\nmode = "convergence"\nlevles = [1]\n')
    assert main(["run", "--config", str(unknown)]) == 2
    assert "field 'levles'" in capsys.readouterr().err


def test_io_error_exit_code(config_file, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["run", "--config", str(config_file), "--out-dir", str(blocker)]) == 3


def test_assert_flag(tmp_path):
    cfg = dict(CONFIG, levels=[1, 2], assertions={"max_error": 1e-9})
    path = tmp_path / "strict.json"
    path.write_text(json.dumps(cfg))
    out = str(tmp_path / "o")
    assert main(["run", "--config", str(path), "--out-dir", out]) == 0
    assert main(["run", "--config", str(path), "--out-dir", out, "--assert"]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_estimator_failure_exit_code(tmp_path):
    # overflow in g on a huge starting point makes every realization non-finite
    cfg = dict(CONFIG, problem="heat-quadratic", points=[{"t": 0.0, "x": [1e200]}])
    path = tmp_path / "overflow.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", "--config", str(path), "--out-dir", str(tmp_path / "o")]) == 1


def test_console_script(config_file, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mlp_pde.cli", "run", "--config", str(config_file),
                           "--out-dir", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
