import hashlib, json, os

import meshio
import numpy as np
import pytest
import scipy.io

import DiagnosticsHandler
import FileHandler
import IonicHandler
import Settings
import StepHandler
from StepHandler import AppliedCurrent, InitialData
from conftest import solverConfig


@pytest.fixture
def trajectory(op, model, gap):
  config = solverConfig(tEnd=0.03, iapp={"gamma1": AppliedCurrent("constant", amplitude=1.0)})
  state = StepHandler.initialize(op, config, InitialData(v1="0.2*x"))
  return StepHandler.run(op, model, gap, config, state)


def test_time_series_has_one_row_per_recorded_state(trajectory, tmp_path):
  energies = DiagnosticsHandler.trajectoryEnergies(trajectory)
  files = FileHandler.emitOutputs(trajectory, energies, str(tmp_path), ["csv"])
  rows = FileHandler.readCsv(files[0])
  assert len(rows) == 4
  assert float(rows[0]["t"]) == 0.0
  assert [int(row["step"]) for row in rows] == [0, 1, 2, 3]
  assert {"total", "dissipation", "mean_ue", "residual"} <= set(rows[0])
  # membrane flux balance is reported per region, not per interface
  assert [name for name in rows[0] if name.startswith("flux")] == [
    "flux_region_intra1", "flux_region_intra2", "flux_region_extra"]
  assert float(rows[0]["flux_region_extra"]) == 0.0


def test_identical_runs_write_identical_bytes(op, model, gap, tmp_path):
  config = solverConfig(tEnd=0.03, iapp={"gamma1": AppliedCurrent("constant", amplitude=1.0)})
  contents = []
  for name in ("a", "b"):
    state = StepHandler.initialize(op, config, InitialData(v1="0.2*x"))
    trajectory = StepHandler.run(op, model, gap, config, state)
    path = FileHandler.emitOutputs(trajectory, DiagnosticsHandler.trajectoryEnergies(trajectory),
                                   str(tmp_path / name), ["csv"])[0]
    with open(path, "rb") as file:
      contents.append(file.read())
  assert contents[0] == contents[1]


def test_vtk_fields_read_back(trajectory, tmp_path):
  files = FileHandler.emitOutputs(trajectory, DiagnosticsHandler.trajectoryEnergies(trajectory), str(tmp_path), ["vtk"])
  assert len(files) == 4
  mesh = trajectory.op.mesh
  grid = meshio.read(files[-1])
  np.testing.assert_allclose(grid.points[:, :2], mesh.vertices)
  np.testing.assert_array_equal(grid.cells_dict["triangle"], mesh.triangles)
  np.testing.assert_array_equal(grid.cell_data["subdomain"][0], mesh.tags)
  np.testing.assert_allclose(grid.point_data["potential"], trajectory.finalState.U)


def test_vtk_rejects_mismatched_point_data(unitCell, tmp_path):
  with pytest.raises(ValueError):
    FileHandler.writeVtk(unitCell, str(tmp_path / "bad.vtk"), {"potential": np.zeros(3)})


def test_binary_state_layout(trajectory, tmp_path):
  path = FileHandler.writeBinary(str(tmp_path / "final_state.bin"), trajectory.finalState)
  header, arrays = FileHandler.readBinary(path)
  assert header["dtype"] == "<f8"
  assert os.path.getsize(path) == 8 * sum(header["blocks"].values())
  assert header["order"] == ["u1", "u2", "ue", "w1", "w2"]
  np.testing.assert_array_equal(arrays["w1"], trajectory.finalState.w1)


def test_matrix_market_export(op, tmp_path):
  system = StepHandler.Stepper(op, IonicHandler.IonicModel(), IonicHandler.GapModel(),
                               solverConfig()).system
  path = FileHandler.writeMatrixMarket(system.matrix, str(tmp_path / "system.mtx"))
  with open(path) as file:
    assert "symmetric" in file.readline()
  assert abs(scipy.io.mmread(path) - system.matrix).max() < 1e-12


def test_manifest_hash_follows_config_bytes(tmp_path):
  a = FileHandler.writeManifest(str(tmp_path / "a"), b"[solver]\ndt = 0.01\n", "run", 1.0, [])
  b = FileHandler.writeManifest(str(tmp_path / "b"), b"[solver]\ndt = 0.01\n", "run", 2.0, [])
  c = FileHandler.writeManifest(str(tmp_path / "c"), b"[solver]\ndt = 0.02\n", "run", 1.0, [])
  hashes = []
  for path in (a, b, c):
    with open(path) as file:
      hashes.append(json.load(file)["config_sha256"])
  assert hashes[0] == hashes[1] != hashes[2]
  assert hashes[0] == hashlib.sha256(b"[solver]\ndt = 0.01\n").hexdigest()


def test_verdict_accepts_numpy_values(tmp_path):
  path = FileHandler.writeVerdict(str(tmp_path), {"passed": np.bool_(True), "value": np.float64(0.5)})
  with open(path) as file:
    assert json.load(file) == {"passed": True, "value": 0.5}


def test_unwritable_path_names_the_path(tmp_path):
  blocker = tmp_path / "file"
  blocker.write_text("x")
  target = str(blocker / "out.csv")
  with pytest.raises(OSError) as info:
    FileHandler.writeCsv(target, [{"a": 1}])
  assert target in str(info.value)


def test_unknown_format_is_a_config_error(trajectory, tmp_path):
  with pytest.raises(Settings.ConfigError):
    FileHandler.emitOutputs(trajectory, [], str(tmp_path), ["hdf5"])
