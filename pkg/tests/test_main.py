import hashlib, json, os

import pytest

import FileHandler
import main
from conftest import ROOT

ZERO = os.path.join(ROOT, "configs", "zero.toml")


def writeConfig(tmp_path, text):
  path = tmp_path / "run.toml"
  path.write_text(text)
  return str(path)


def readJson(path):
  with open(path) as file:
    return json.load(file)


def test_zero_run(tmp_path):
  out = str(tmp_path / "out")
  assert main.main(["run", "--config", ZERO, "--output", out]) == 0
  rows = FileHandler.readCsv(os.path.join(out, "timeseries.csv"))
  assert len(rows) == 4
  assert all(float(row["total"]) == 0.0 for row in rows)
  verdict = readJson(os.path.join(out, "verdict.json"))
  assert verdict["passed"] and verdict["steps"] == 3
  manifest = readJson(os.path.join(out, "manifest.json"))
  with open(ZERO, "rb") as file:
    assert manifest["config_sha256"] == hashlib.sha256(file.read()).hexdigest()
  assert "timeseries.csv" in manifest["files"] and "final_state.bin" in manifest["files"]
  assert os.path.exists(os.path.join(out, "last.log"))


def test_certify_default_model(tmp_path):
  out = str(tmp_path)
  assert main.main(["certify", "--output", out]) == 0
  verdict = readJson(os.path.join(out, "verdict.json"))
  assert verdict["criteria"]["check_iv"] and verdict["coupling_constant"] >= 0
  assert len(FileHandler.readCsv(os.path.join(out, "certification.csv"))) == 7


def test_certify_without_beta1_fails(tmp_path):
  config = writeConfig(tmp_path, "[ionic]\nbeta1 = 0.0\n")
  assert main.main(["certify", "--config", config, "--output", str(tmp_path / "out")]) == 1
  verdict = readJson(os.path.join(str(tmp_path / "out"), "verdict.json"))
  assert not verdict["criteria"]["check_iv"]
  assert verdict["criteria"]["check_i"]


SMALL_SPD = "[experiments.spd]\ndensities = [4]\nepsilons = [1.0, 0.1]\nrandomVectors = 10\n"


@pytest.mark.parametrize("delta, expected", [("1e-3", "strict PD: pass"), ("0", "semidefinite: pass, strict: fail")])
def test_spd_command(tmp_path, delta, expected):
  config = writeConfig(tmp_path, SMALL_SPD)
  out = str(tmp_path / "out")
  assert main.main(["spd", "--config", config, "--output", out, "--delta", delta]) == 0
  with open(os.path.join(out, "spd.txt")) as file:
    text = file.read()
  assert text.count(expected) == 2


def test_spd_rejects_negative_delta(tmp_path):
  assert main.main(["spd", "--output", str(tmp_path), "--delta", "-1"]) == 2


def test_stability_command(tmp_path):
  config = writeConfig(tmp_path, "[solver]\ntEnd = 0.05\n")
  assert main.main(["stability", "--config", config, "--output", str(tmp_path / "out"), "--jobs", "2"]) == 0
  assert os.path.exists(os.path.join(str(tmp_path / "out"), "stability.csv"))


def test_apriori_command_reports_poincare_constant(tmp_path):
  config = writeConfig(tmp_path, "[solver]\ntEnd = 0.03\n\n[experiments.apriori]\ndensities = [4]\npoincareSamples = 3\n")
  out = str(tmp_path / "out")
  assert main.main(["apriori", "--config", config, "--output", out]) == 0
  rows = FileHandler.readCsv(os.path.join(out, "apriori.csv"))
  assert rows[-1]["monitor"] == "poincare_constant" and float(rows[-1]["value"]) > 0
  verdict = readJson(os.path.join(out, "verdict.json"))
  assert len(verdict["poincare_constants"]) == 1 and verdict["criteria"]["poincare_finite"]


def test_nondim_flags_the_published_value(tmp_path):
  assert main.main(["nondim", "--output", str(tmp_path)]) == 0
  with open(os.path.join(str(tmp_path), "scales.txt")) as file:
    assert "DISCREPANCY" in file.read()
  verdict = readJson(os.path.join(str(tmp_path), "verdict.json"))
  assert verdict["discrepancy_flagged"] and verdict["epsilon"] == pytest.approx(1.41421356e-2, rel=1e-6)


@pytest.mark.parametrize("text", ["[solver]\ndtt = 0.1\n", "[geometry]\ninnerMargin = 0.7\n", "[ionic]\ntheta = 2.0\n",
                                  "experiment = \"spd\"\n", "[conductivity]\nalpha = 5.0\nbeta = 1.0\n"])
def test_configuration_errors_exit_with_two(tmp_path, text):
  config = writeConfig(tmp_path, text)
  assert main.main(["run", "--config", config, "--output", str(tmp_path / "out")]) == 2


def test_missing_config_exits_with_two(tmp_path):
  assert main.main(["run", "--config", str(tmp_path / "missing.toml")]) == 2


def test_solver_failure_exits_with_one(tmp_path):
  config = writeConfig(tmp_path, "[solver]\nlinSolver = \"cg\"\nlinMaxit = 1\ntEnd = 0.02\n\n[initial]\nv1 = \"0.5*x\"\n")
  assert main.main(["run", "--config", config, "--output", str(tmp_path / "out")]) == 1


def test_unknown_command_is_a_usage_error():
  with pytest.raises(SystemExit) as info:
    main.main(["simulate-everything"])
  assert info.value.code == 2
