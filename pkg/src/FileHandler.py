import contextlib, csv, hashlib, json, os, os.path, platform
from importlib import metadata

import meshio
import numpy as np
import scipy
import scipy.io
import scipy.sparse as sp
import sympy

# This module should only write artifacts. Every writer creates its directory and reports failures with the path

import Settings
import AssemblyHandler
from log import log


OUTPUT_FORMATS = ("csv", "vtk", "binary", "mtx")


@contextlib.contextmanager
def openOutput(path, mode="w", **kwargs):
  """ Opens path for writing, creating parents. OSErrors are re-raised naming the path """
  try:
    directory = os.path.dirname(path)
    if directory:
      os.makedirs(directory, exist_ok=True)
    file = open(path, mode, **kwargs)
  except OSError as e:
    raise OSError("Cannot write '{}': {}".format(path, e.strerror or e)) from e
  with file:
    yield file


def _text(value):
  if isinstance(value, (float, np.floating)):
    return repr(float(value))
  return value


def writeCsv(path, rows, columns=None):
  """ Writes dict rows. Floats are written with repr, so identical runs give identical bytes """
  rows = list(rows)
  columns = columns or (list(rows[0]) if rows else [])
  with openOutput(path, newline="") as file:
    writer = csv.DictWriter(file, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
      writer.writerow({key: _text(value) for key, value in row.items()})
  log.debug("Wrote", len(rows), "rows to", path)
  return path


def readCsv(path):
  with open(path, newline="") as file:
    return list(csv.DictReader(file))


def timeSeriesRows(trajectory, energies):
  """ One row per recorded state: time, every energy term, solver residual and flux balance """
  rows = []
  for state, report, record in zip(trajectory.states, trajectory.reports, energies):
    row = {"t": state.t, "step": int(round(state.t / trajectory.config.dt))}
    row.update({name: value for name, value in record.entries().items() if name != "t"})
    row["mean_ue"] = float(trajectory.op.constraint @ state.U)
    row["residual"] = report.residual if report else 0.0
    row["iterations"] = report.iterations if report else 0
    for region in ("intra1", "intra2", "extra"):
      row["flux_region_" + region] = report.fluxBalance[region] if report else 0.0
    rows.append(row)
  return rows


def writeVtk(mesh, path, pointData=None):
  """ Legacy ASCII unstructured grid through meshio, with the subdomain tag as cell data """
  pointData = {name: np.asarray(values, dtype=float) for name, values in (pointData or {}).items()}
  for name, values in pointData.items():
    if values.shape != (mesh.nVertices,):
      raise ValueError("point data '{}' has shape {}, expected ({},)".format(name, values.shape, mesh.nVertices))
  points = np.column_stack([mesh.vertices, np.zeros(mesh.nVertices)])
  grid = meshio.Mesh(points, [("triangle", mesh.triangles)], point_data=pointData,
                     cell_data={"subdomain": [np.asarray(mesh.tags, dtype=np.int32)]})
  try:
    directory = os.path.dirname(path)
    if directory:
      os.makedirs(directory, exist_ok=True)
    meshio.write(path, grid, file_format="vtk", binary=False)
  except OSError as e:
    raise OSError("Cannot write '{}': {}".format(path, e.strerror or e)) from e
  return path


def writeBinary(path, state):
  """ Final state as plain little-endian float64, with a JSON header describing the blocks """
  layout = state.layout
  blocks = {"u1": layout.blocks[1] - layout.blocks[0], "u2": layout.blocks[2] - layout.blocks[1],
            "ue": layout.blocks[3] - layout.blocks[2], "w1": len(state.w1), "w2": len(state.w2)}
  with openOutput(path, "wb") as file:
    file.write(np.ascontiguousarray(state.vector(), dtype="<f8").tobytes())
  header = {"dtype": "<f8", "t": state.t, "order": list(blocks), "blocks": blocks, "data": os.path.basename(path)}
  writeJson(path + ".json", header)
  return path


def readBinary(path):
  """ :return: (header dict, dict of block name -> array) """
  with open(path + ".json") as file:
    header = json.load(file)
  data = np.fromfile(path, dtype=header["dtype"])
  arrays, start = {}, 0
  for name in header["order"]:
    size = header["blocks"][name]
    arrays[name] = data[start:start + size]
    start += size
  return header, arrays


def _jsonValue(value):
  if isinstance(value, (np.generic, np.ndarray)):
    return value.tolist()
  raise TypeError("{} is not JSON serializable".format(type(value).__name__))


def writeJson(path, data):
  with openOutput(path) as file:
    json.dump(data, file, indent=2, sort_keys=True, default=_jsonValue)
    file.write("\n")
  return path


def writeText(path, text):
  with openOutput(path) as file:
    file.write(text if text.endswith("\n") else text + "\n")
  return path


def writeMatrixMarket(matrix, path):
  """ Symmetric coordinate Matrix Market file, only the lower triangle is stored """
  matrix = sp.tril(sp.coo_matrix(matrix)).tocoo()
  try:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    scipy.io.mmwrite(path, matrix, field="real", symmetry="symmetric")
  except OSError as e:
    raise OSError("Cannot write '{}': {}".format(path, e.strerror or e)) from e
  return path if path.endswith(".mtx") else path + ".mtx"


def configHash(raw):
  return hashlib.sha256(raw).hexdigest()


def packageVersion(name):
  try:
    return metadata.version(name)
  except metadata.PackageNotFoundError:
    return "unknown"


def versions():
  return {
    "python": platform.python_version(),
    "numpy": np.__version__,
    "scipy": scipy.__version__,
    "sympy": sympy.__version__,
    "meshio": meshio.__version__,
    "tridomain-sim": packageVersion("tridomain-sim"),
  }


def writeManifest(directory, raw, command, wallTime, files):
  """ manifest.json: config hash, library versions, wall time and the written files """
  manifest = {
    "command": command,
    "config_sha256": configHash(raw),
    "versions": versions(),
    "wall_time": wallTime,
    "files": sorted(os.path.relpath(f, directory) for f in files),
  }
  return writeJson(os.path.join(directory, "manifest.json"), manifest)


def writeVerdict(directory, verdict):
  return writeJson(os.path.join(directory, "verdict.json"), verdict)


def emitOutputs(trajectory, energies, directory, formats=("csv",)):
  """
  Writes the artifacts of a finished run
  :return: list of written paths
  """
  unknown = set(formats) - set(OUTPUT_FORMATS)
  if unknown:
    raise Settings.ConfigError("Unknown output formats {}; choose from {}".format(sorted(unknown), OUTPUT_FORMATS))
  written = []
  if "csv" in formats:
    written.append(writeCsv(os.path.join(directory, "timeseries.csv"), timeSeriesRows(trajectory, energies)))
  if "vtk" in formats:
    mesh = trajectory.op.mesh
    for index, state in enumerate(trajectory.states):
      written.append(writeVtk(mesh, os.path.join(directory, "fields_{:05d}.vtk".format(index)),
                              {"potential": state.U}))
  if "binary" in formats:
    path = writeBinary(os.path.join(directory, "final_state.bin"), trajectory.finalState)
    written += [path, path + ".json"]
  if "mtx" in formats:
    config, model, gap = trajectory.config, trajectory.model, trajectory.gap
    system = AssemblyHandler.buildSystemMatrix(trajectory.op, config.eps, config.delta, config.dt, model.beta1, gap.gGap, gap.cRatio)
    written.append(writeMatrixMarket(system.matrix, os.path.join(directory, "system.mtx")))
  log.info("Wrote", len(written), "files to", directory)
  return written
