import math
from dataclasses import dataclass, field, asdict

import numpy as np

# Measurable forms of the energy estimates. Everything here reads immutable states and never mutates them

import Settings
import IonicHandler
import MeshHandler
from MeshHandler import I1, I2, E
from StepHandler import SystemState
from log import log

settings = Settings.units
settings.updateDefaults({
  "ellMic": 0.01,  # cm
  "Rm": 1e4,       # Ohm cm^2
  "Cm": 1.0,       # uF / cm^2
  "lam": 5.0,      # mS / cm
  "deltaV": 100.0, # mV
  "deltaW": 1.0,
  "cGap": 0.5,     # uF / cm^2
})

# Published value for ellMic = 100 um, lam = 5 mS/cm, Rm = 10^4 Ohm cm^2
PUBLISHED_EPSILON = 7.1e-3

# 3-point Gauss-Legendre on [0, 1]
GAUSS_NODES = np.array([0.5 - math.sqrt(3 / 5) / 2, 0.5, 0.5 + math.sqrt(3 / 5) / 2])
GAUSS_WEIGHTS = np.array([5 / 18, 8 / 18, 5 / 18])


def lineIntegral(facets: MeshHandler.FacetSet, values, integrand):
  """
  Integral of integrand(v) over an interface, v linear on each facet.
  Facets where v changes sign are split at the root so kinks of |v| fall on a sub-facet end
  """
  a, b = values[facets.local[:, 0]], values[facets.local[:, 1]]
  with np.errstate(divide="ignore", invalid="ignore"):
    cut = np.where(a * b < 0, a / (a - b), 1.0)
  total = np.zeros(len(a))
  for low, high in ((0.0, cut), (cut, 1.0)):
    span = high - low
    for node, weight in zip(GAUSS_NODES, GAUSS_WEIGHTS):
      tau = low + span * node
      total += weight * span * integrand(a + (b - a) * tau)
  return math.fsum(total * facets.lengths)


def _quadratic(matrix, x):
  return float(x @ (matrix @ x))


@dataclass
class EnergyReport:
  t: float = 0.0
  membrane1: float = 0.0
  membrane2: float = 0.0
  gating1: float = 0.0
  gating2: float = 0.0
  gap: float = 0.0
  deltaVolume: float = 0.0
  deltaTrace: float = 0.0
  dissipation: float = 0.0
  dissipation1: float = 0.0
  dissipation2: float = 0.0
  dissipationE: float = 0.0
  ionic: float = 0.0
  rNorm1: float = 0.0
  rNorm2: float = 0.0
  gapDissipation: float = 0.0
  dtV: float = 0.0
  dtW: float = 0.0
  dtS: float = 0.0
  total: float = 0.0 # discrete energy E of the step scheme

  @property
  def rNorm(self):
    return self.rNorm1 + self.rNorm2

  def entries(self):
    return asdict(self)

  def nonnegative(self, tolerance=0.0):
    return all(value >= -tolerance for name, value in self.entries().items() if name not in ("t", "ionic"))

  def powerMeanConsistent(self, measures, eps, r, tolerance=1e-12):
    """ Hoelder on each membrane: int v^2 <= (int |v|^r)^(2/r) |Gamma|^(1-2/r) """
    for squared, rNorm, length in ((self.membrane1, self.rNorm1, measures[0]), (self.membrane2, self.rNorm2, measures[1])):
      bound = (rNorm / eps) ** (2 / r) * length ** (1 - 2 / r)
      if squared / eps > bound * (1 + tolerance) + tolerance:
        return False
    return True


def energy(state: SystemState, op, model: IonicHandler.IonicModel, config, gap=None, previous=None) -> EnergyReport:
  """
  Every term of the energy identity at one state
  :param previous: earlier state used for the backward-difference time derivative norms
  """
  gap = gap or IonicHandler.GapModel()
  mesh, B = op.mesh, op.traceMass
  eps, delta, r = config.eps, config.delta, model.r
  U = state.U
  report = EnergyReport(t=state.t)
  report.membrane1 = eps * _quadratic(B["gamma1"], state.v1)
  report.membrane2 = eps * _quadratic(B["gamma2"], state.v2)
  report.gating1 = eps * _quadratic(B["gamma1"], state.w1)
  report.gating2 = eps * _quadratic(B["gamma2"], state.w2)
  report.gap = eps * _quadratic(B["gamma12"], state.s)
  report.deltaVolume = delta * _quadratic(op.volumeMass, U)
  report.deltaTrace = delta * _quadratic(op.sideMass, U)
  for tag, name in ((I1, "dissipation1"), (I2, "dissipation2"), (E, "dissipationE")):
    s = mesh.block(tag)
    setattr(report, name, _quadratic(op.block(op.stiffness, tag), U[s]))
  report.dissipation = _quadratic(op.stiffness, U)
  tilde = lambda v: IonicHandler.tildeIa(model, v) * v
  report.ionic = eps * (lineIntegral(mesh.gamma1, state.v1, tilde) + lineIntegral(mesh.gamma2, state.v2, tilde))
  power = lambda v: np.abs(v) ** r
  report.rNorm1 = eps * lineIntegral(mesh.gamma1, state.v1, power)
  report.rNorm2 = eps * lineIntegral(mesh.gamma2, state.v2, power)
  report.gapDissipation = gap.cRatio * gap.gGap * report.gap
  if previous is not None and state.t > previous.t:
    dt = state.t - previous.t
    report.dtV = eps * (_quadratic(B["gamma1"], state.v1 - previous.v1) + _quadratic(B["gamma2"], state.v2 - previous.v2)) / dt ** 2
    report.dtW = eps * (_quadratic(B["gamma1"], state.w1 - previous.w1) + _quadratic(B["gamma2"], state.w2 - previous.w2)) / dt ** 2
    report.dtS = eps * _quadratic(B["gamma12"], state.s - previous.s) / dt ** 2
  report.total = 0.5 * (report.membrane1 + report.membrane2 + model.alpha4 * (report.gating1 + report.gating2)
                        + gap.cRatio * report.gap + report.deltaVolume + report.deltaTrace)
  return report


def trajectoryEnergies(trajectory):
  """ EnergyReport for every recorded state, time derivatives taken between consecutive records """
  reports, previous = [], None
  for state in trajectory.states:
    reports.append(energy(state, trajectory.op, trajectory.model, trajectory.config, trajectory.gap, previous))
    previous = state
  return reports


def stepDissipation(state, op, model, config, gap):
  """ Dissipation rate of the passive scheme at one state: stiffness, linear ionic and resistive gap terms """
  B = op.traceMass
  eps = config.eps
  return (_quadratic(op.stiffness, state.U)
          + eps * model.beta1 * (_quadratic(B["gamma1"], state.v1) + _quadratic(B["gamma2"], state.v2))
          + eps * gap.cRatio * gap.gGap * _quadratic(B["gamma12"], state.s))


@dataclass
class AprioriReport:
  energyVW: float = 0.0      # sup_t of membrane, gating and gap energies
  energyU: float = 0.0       # sum over subdomains of the time-integrated H1 norm
  normVR: float = 0.0        # (int eps |v|^r)^(1/r)
  dualIa: float = 0.0        # (int eps |I_a(v)|^(r/(r-1)))^((r-1)/r)
  timeDerivative: float = 0.0
  dualityPassed: bool = True
  dualityMargin: float = math.inf
  samples: int = 0

  def monitors(self):
    return {"energy_vw": self.energyVW, "energy_u": self.energyU, "norm_vr": self.normVR, "dual_ia": self.dualIa,
            "time_derivative": self.timeDerivative}

  def rows(self):
    return [{"monitor": name, "value": repr(float(value))} for name, value in self.monitors().items()] + [
      {"monitor": "duality_margin", "value": repr(float(self.dualityMargin))}]

  def compare(self, other):
    """ Relative difference of every monitor, measured against the larger of the two """
    differences = {}
    for name, value in self.monitors().items():
      reference = max(abs(value), abs(other.monitors()[name]))
      differences[name] = abs(value - other.monitors()[name]) / reference if reference else 0.0
    return differences


def aprioriMonitor(trajectory, energies=None) -> AprioriReport:
  op, model, config = trajectory.op, trajectory.model, trajectory.config
  mesh, eps, r = op.mesh, config.eps, model.r
  q = r / (r - 1)
  energies = energies or trajectoryEnergies(trajectory)
  report = AprioriReport(samples=len(trajectory.states))
  measures = MeshHandler.interfaceMeasures(mesh)
  subdomainH1 = np.zeros(3)
  rIntegral, dualIntegral, derivative = 0.0, 0.0, 0.0
  for index, (state, record) in enumerate(zip(trajectory.states, energies)):
    report.energyVW = max(report.energyVW, record.membrane1 + record.membrane2 + record.gating1 + record.gating2
                          + record.gap + record.deltaVolume + record.deltaTrace)
    dual = lambda v: np.abs(IonicHandler.ia(model, v)) ** q
    duals = (eps * lineIntegral(mesh.gamma1, state.v1, dual), eps * lineIntegral(mesh.gamma2, state.v2, dual))
    for dualValue, rValue, length in zip(duals, (record.rNorm1, record.rNorm2), measures[:2]):
      bound = model.alpha1 * (rValue ** ((r - 1) / r) + eps ** ((r - 1) / r) * length ** ((r - 1) / r))
      margin = (bound - dualValue ** (1 / q)) / (1 + bound)
      report.dualityMargin = min(report.dualityMargin, margin)
    if index == 0:
      continue
    dt = state.t - trajectory.states[index - 1].t
    for tag in (I1, I2, E):
      s = mesh.block(tag)
      u = state.U[s]
      subdomainH1[tag] += dt * (_quadratic(op.block(op.volumeMass, tag), u) + _quadratic(op.block(op.laplacian, tag), u))
    rIntegral += dt * record.rNorm
    dualIntegral += dt * sum(duals)
    derivative += dt * (record.dtV + record.dtW + record.dtS)
  report.energyU = float(np.sum(np.sqrt(subdomainH1)))
  report.normVR = rIntegral ** (1 / r)
  report.dualIa = dualIntegral ** (1 / q)
  report.timeDerivative = derivative
  report.dualityPassed = report.dualityMargin >= -1e-12
  log.debug("A-priori monitors:", report.monitors())
  return report


@dataclass
class PoincareReport:
  ratios: dict = field(default_factory=dict) # (subdomain name, component) -> ratio, nan when undefined
  undefined: list = field(default_factory=list)

  @property
  def defined(self):
    return not self.undefined

  @property
  def maximum(self):
    values = [value for value in self.ratios.values() if math.isfinite(value)]
    return max(values) if values else math.nan


def poincareTraceRatio(state: SystemState, op, eps) -> PoincareReport:
  """
  For every intracellular component: |u_i|^2 / (eps |v|^2 on its membrane + |grad u_i|^2 + |grad u_e|^2)
  """
  mesh = op.mesh
  U = state.U
  extracellular = _quadratic(op.laplacian, U * (mesh.vertexTags == E))
  report = PoincareReport()
  for tag, membrane in ((I1, "gamma1"), (I2, "gamma2")):
    count, labels = MeshHandler.components(mesh, tag)
    block = mesh.block(tag)
    facets = mesh.facets[membrane]
    v = op.trace(membrane, U)
    for component in range(count):
      mask = np.zeros(mesh.nVertices)
      mask[block.start + np.flatnonzero(labels == component)] = 1.0
      u = U * mask
      vPart = v * mask[facets.innerNodes]
      denominator = eps * _quadratic(op.traceMass[membrane], vPart) + _quadratic(op.laplacian, u) + extracellular
      key = (MeshHandler.TAG_NAMES[tag], component)
      if denominator <= 0:
        report.ratios[key] = math.nan
        report.undefined.append(key)
      else:
        report.ratios[key] = _quadratic(op.volumeMass, u) / denominator
  return report


def randomSmoothState(op, rng, modes=2, amplitude=1.0):
  """
  Smooth random potentials: a constant per intracellular component plus a few Fourier modes of the
  physical coordinates. The extracellular potential is shifted to mean zero
  """
  mesh = op.mesh
  width, height = mesh.domainSize
  x, y = mesh.vertices[:, 0] / width, mesh.vertices[:, 1] / height
  U = np.zeros(mesh.nVertices)
  for tag in (I1, I2, E):
    block = mesh.block(tag)
    coefficients = rng.standard_normal((modes, modes, 2))
    values = np.zeros(block.stop - block.start)
    for j in range(modes):
      for k in range(modes):
        phase = math.pi * (j * x[block] + k * y[block])
        values += amplitude * (coefficients[j, k, 0] * np.cos(phase) + coefficients[j, k, 1] * np.sin(phase)) / (1 + j + k)
    if tag != E:
      count, labels = MeshHandler.components(mesh, tag)
      values += rng.standard_normal(count)[labels]
    U[block] = values
  c = op.constraint
  U -= (c @ U) / c.sum() * (mesh.vertexTags == E)
  return SystemState(0.0, U, np.zeros(mesh.gamma1.size), np.zeros(mesh.gamma2.size), op.layout)


def poincareConstant(op, eps, samples=100, seed=0):
  """ Largest ratio over random smooth states, an estimate of the Poincare-trace constant """
  rng = np.random.default_rng(seed)
  largest = 0.0
  for _ in range(samples):
    report = poincareTraceRatio(randomSmoothState(op, rng), op, eps)
    if report.defined:
      largest = max(largest, report.maximum)
  return largest


@dataclass(frozen=True)
class PhysicalUnits:
  ellMic: float = 0.01
  Rm: float = 1e4
  Cm: float = 1.0
  lam: float = 5.0
  deltaV: float = 100.0
  deltaW: float = 1.0
  cGap: float = 0.5

  def __post_init__(self):
    for name in self.__dataclass_fields__:
      value = getattr(self, name)
      if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise Settings.ConfigError("units.{} must be positive, got {!r}".format(name, value))

  @classmethod
  def fromSettings(cls, section):
    return cls(**{name: float(section[name]) for name in cls.__dataclass_fields__})


@dataclass
class ScaleReport:
  epsilon: float
  length: float       # cm
  tauM: float         # ms
  crossCheck: float   # sqrt(ellMic / (Rm lam))
  identityError: float
  publishedEpsilon: float
  discrepancy: float  # epsilon / publishedEpsilon
  flagged: bool
  currentScales: dict

  def rows(self):
    rows = [{"quantity": name, "value": repr(float(getattr(self, name)))}
            for name in ("epsilon", "length", "tauM", "crossCheck", "identityError", "publishedEpsilon", "discrepancy")]
    rows += [{"quantity": "scale_" + name, "value": repr(float(value))} for name, value in self.currentScales.items()]
    return rows

  def toText(self):
    lines = [
      "L = sqrt(Rm lam ellMic)       = {:.6g} cm".format(self.length),
      "tau_m = Rm Cm                 = {:.6g} ms".format(self.tauM),
      "epsilon = ellMic / L          = {:.6g}".format(self.epsilon),
      "sqrt(ellMic / (Rm lam))       = {:.6g}".format(self.crossCheck),
      "L / (Rm lam) identity error   = {:.3e}".format(self.identityError),
      "published epsilon             = {:.6g}".format(self.publishedEpsilon),
      "ratio computed / published    = {:.4f}{}".format(self.discrepancy,
                                                        "  DISCREPANCY" if self.flagged else ""),
    ]
    lines += ["current scale {:<16}= {:.6g}".format(name, value) for name, value in self.currentScales.items()]
    return "\n".join(lines)


def nondimensionalize(units: PhysicalUnits, published=PUBLISHED_EPSILON) -> ScaleReport:
  """
  Characteristic length, time and epsilon from physical membrane data.
  lam is converted from mS/cm to S/cm, so Rm * lam is in cm
  """
  conductance = units.lam * 1e-3
  resistanceLength = units.Rm * conductance
  length = math.sqrt(resistanceLength * units.ellMic)
  epsilon = units.ellMic / length
  crossCheck = math.sqrt(units.ellMic / resistanceLength)
  identity = length / resistanceLength
  identityError = abs(identity - crossCheck) / crossCheck
  tauM = units.Rm * units.Cm * 1e-6 * 1e3
  discrepancy = epsilon / published
  report = ScaleReport(
    epsilon=epsilon, length=length, tauM=tauM, crossCheck=crossCheck, identityError=identityError,
    publishedEpsilon=published, discrepancy=discrepancy, flagged=abs(discrepancy - 1) > 0.05,
    currentScales={
      "ionic": units.Rm / units.deltaV,
      "applied": units.Rm / units.deltaV,
      "gating": tauM / units.deltaW,
      "gap": units.Rm * units.Cm / (units.deltaV * units.cGap),
    })
  log.info("Nondimensional epsilon", epsilon, "with L =", length, "cm and tau_m =", tauM, "ms")
  if identityError > 1e-12:
    log.warning("L / (Rm lam) and sqrt(ellMic / (Rm lam)) differ by", identityError)
  if report.flagged:
    log.warning("Computed epsilon {:.4g} differs from the published {:.4g} by a factor {:.3f}".format(
      epsilon, published, discrepancy))
  return report
