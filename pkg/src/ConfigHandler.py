# This defines the run configuration: a TOML file layered over the defaults every module registers
import os

import Settings
import MeshHandler
import IonicHandler
import AssemblyHandler
import StepHandler
import DiagnosticsHandler
import ExperimentHandler
import FileHandler
from log import log

EXPERIMENTS = ("run", "certify", "spd", "stability", "mms", "delta-limit", "apriori", "nondim")
ALIASES = {"simulate": "run", "delta_limit": "delta-limit", "deltaLimit": "delta-limit"}


def experimentName(name):
  name = ALIASES.get(name, name)
  if name not in EXPERIMENTS:
    raise Settings.ConfigError("Unknown experiment '{}'; choose from {}".format(name, EXPERIMENTS))
  return name


class RunConfig:
  """
  A "RunConfig" is everything one invocation is defined by.
  Each section is an instance layered over the module defaults, so untouched keys follow the modules
  """

  def __init__(self):
    self.sections = {name: section.createInstance() for name, section in Settings.sections.items()}
    self.experiment = None
    self.path = None
    self.raw = b""

  def __getitem__(self, name):
    return self.sections[name]

  def initialize(self, fileDict):
    """
    Fills the settings from a dict read from a config file

    The dict may contain any of the sections (geometry, conductivity, ionic, gap, solver, initial, outputs,
    units, experiments) as tables, plus an optional "experiment" name
    """
    log.debug("Parsing run configuration")
    for key, value in fileDict.items():
      if key == "experiment":
        self.experiment = experimentName(value)
      elif key in self.sections:
        self.sections[key].applyOverrides(value, key)
      else:
        raise Settings.ConfigError("Unknown section [{}]".format(key))
    self.outputs() # formats and stride are checked up front
    return self

  def checkExperiment(self, command):
    if self.experiment is not None and self.experiment != experimentName(command):
      raise Settings.ConfigError("Config selects experiment '{}' but the command is '{}'".format(self.experiment, command))

  def unitCell(self, density=None):
    spec = MeshHandler.UnitCellSpec.fromSettings(self["geometry"])
    if density is None:
      return spec
    return MeshHandler.UnitCellSpec(spec.cellLengths, spec.innerMargin, spec.splitFraction, int(density))

  def tiling(self):
    return MeshHandler.TilingSpec.fromSettings(self["geometry"])

  def conductivity(self, modulation=None):
    spec = AssemblyHandler.ConductivitySpec.fromSettings(self["conductivity"])
    if modulation is None:
      return spec
    return AssemblyHandler.ConductivitySpec(spec.tensorI1, spec.tensorI2, spec.tensorE, modulation, spec.alpha, spec.beta)

  def model(self):
    return IonicHandler.IonicModel.fromSettings(self["ionic"])

  def gap(self):
    return IonicHandler.GapModel.fromSettings(self["gap"])

  def solver(self):
    return StepHandler.SolverConfig.fromSettings(self["solver"])

  def initial(self):
    return StepHandler.InitialData.fromSettings(self["initial"])

  def units(self):
    return DiagnosticsHandler.PhysicalUnits.fromSettings(self["units"])

  def outputs(self):
    section = self["outputs"]
    formats = list(section["formats"])
    unknown = set(formats) - set(FileHandler.OUTPUT_FORMATS)
    if unknown:
      raise Settings.ConfigError("Unknown output formats {}; choose from {}".format(sorted(unknown), FileHandler.OUTPUT_FORMATS))
    stride = section["stride"]
    if isinstance(stride, bool) or not isinstance(stride, int) or stride < 1:
      raise Settings.ConfigError("outputs.stride must be an integer >= 1, got {!r}".format(stride))
    return {"directory": str(section["directory"]), "stride": stride, "formats": formats}

  def experimentSettings(self, name):
    return Settings.plain(self["experiments"][name])

  def buildOperator(self, density=None, modulation=None):
    mesh = MeshHandler.buildMesh(self.unitCell(density), self.tiling())
    return AssemblyHandler.assemble(mesh, self.conductivity(modulation))

  def runSpec(self, density=None):
    return ExperimentHandler.RunSpec(op=self.buildOperator(density), model=self.model(), gap=self.gap(),
                                     config=self.solver(), initial=self.initial())


def loadConfig(path) -> RunConfig:
  raw, fileDict = Settings.readToml(path)
  config = RunConfig().initialize(fileDict)
  config.path, config.raw = os.path.abspath(path), raw
  log.info("Loaded configuration", path)
  return config
