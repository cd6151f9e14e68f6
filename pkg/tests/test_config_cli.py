import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from twobsde.cli import main
from twobsde.config import ExperimentConfig
from twobsde.errors import ConfigurationError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


# -- configuration --------------------------------------------------------------

def test_round_trip():
    cfg = ExperimentConfig.from_toml(CONFIGS / "suite.toml")
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert cfg.generator.preset == "signed_sqrt" and cfg.grid.n_t == 200


def test_defaults_fill_missing_sections(tmp_path):
    cfg = ExperimentConfig.from_toml(_write(tmp_path, 'name = "x"\n'))
    assert cfg.bounds.a_low == 0.5 and cfg.tolerances.c_k == 0.1


@pytest.mark.parametrize("text", [
    'nme = "typo"\n',
    '[grid]\nnx = 10\n',
    '[grid]\nn_t = "many"\n',
    '[grid]\nn_t = 2.5\n',
    '[paths]\nseed = true\n',
    '[generator]\npreset = "nope"\n',
    '[tolerances]\nc_k = -1.0\n',
    'grid = 3\n',
    '[grid\n',
])
def test_invalid_configs(tmp_path, text):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_toml(_write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_toml(tmp_path / "absent.toml")


def test_int_accepted_for_float(tmp_path):
    cfg = ExperimentConfig.from_toml(_write(tmp_path, "[grid]\nT = 2\n"))
    assert cfg.grid.T == 2.0 and isinstance(cfg.grid.T, float)


# -- exit codes and artifacts -------------------------------------------------------

def test_null_suite_passes(tmp_path, capsys):
    code = main(["suite", "--config", str(CONFIGS / "null.toml"), "--out", str(tmp_path)])
    assert code == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["failed"] == [] and summary["checks"] > 0
    verdicts = json.loads((tmp_path / "verdicts.json").read_text())
    assert all(v["pass"] for v in verdicts)
    assert (tmp_path / "config.echo.json").exists()


def test_configuration_error_exit(tmp_path):
    cfg = _write(tmp_path, '[grid]\nn_t = "x"\n')
    out = tmp_path / "o"
    assert main(["hjb", "--config", str(cfg), "--out", str(out)]) == 2
    err = json.loads((out / "error.json").read_text())
    assert err["kind"] == "configuration" and err["type"] == "ConfigurationError"


def test_unknown_subcommand_exit(tmp_path):
    assert main(["frobnicate", "--config", str(CONFIGS / "null.toml"), "--out", str(tmp_path)]) == 2


def test_numerical_error_exit(tmp_path):
    # paths leave a narrow grid almost surely
    cfg = _write(tmp_path, "[grid]\nx_min = -0.5\nx_max = 0.5\nn_x = 11\n[paths]\nn_paths = 200\n")
    out = tmp_path / "o"
    assert main(["assemble", "--config", str(cfg), "--out", str(out)]) == 3
    err = json.loads((out / "error.json").read_text())
    assert err["kind"] == "numerical" and err["type"] == "DomainExitError"


def test_failed_check_exit(tmp_path):
    text = '[generator]\npreset = "signed_sqrt"\n[terminal]\npreset = "cos"\n[tolerances]\napprox_tol = 1e-12\n'
    out = tmp_path / "o"
    assert main(["approx-converge", "--config", str(_write(tmp_path, text)), "--out", str(out)]) == 1
    failed = [v["check"] for v in json.loads((out / "verdicts.json").read_text()) if not v["pass"]]
    assert failed == ["approx.limit_gap"]


def test_hjb_bsb_value(tmp_path):
    assert main(["hjb", "--config", str(CONFIGS / "bsb.toml"), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "hjb_value.csv").open()))
    at0 = min(rows, key=lambda r: abs(float(r["x"])))
    assert abs(float(at0["u"]) - 1.5) <= 2e-3


def test_mct_demo_row(tmp_path):
    assert main(["mct-demo", "--config", str(CONFIGS / "bsb.toml"), "--out", str(tmp_path)]) == 0
    rows = {float(r["n"]): r for r in csv.DictReader((tmp_path / "mct_demo.csv").open())}
    assert float(rows[4.0]["bounded_sup"]) == pytest.approx(0.375, abs=0.02)
    assert float(rows[4.0]["unbounded_sup"]) == pytest.approx(2.0, abs=0.1)


def test_seed_and_level_overrides(tmp_path):
    out = tmp_path / "o"
    main(["solve", "--config", str(CONFIGS / "null.toml"), "--out", str(out), "--seed", "5", "--level", "0"])
    echo = json.loads((out / "config.echo.json").read_text())
    assert echo["paths"]["seed"] == 5 and echo["family"]["level"] == 0


def test_console_script_module(tmp_path):
    res = subprocess.run([sys.executable, "-m", "twobsde.cli", "solve", "--config", str(CONFIGS / "null.toml"),
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout.strip().splitlines()[-1])["subcommand"] == "solve"
