import math
from concurrent.futures import ThreadPoolExecutor, wait as ThreadWait
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla
import sympy

# Verification experiments. Each driver fans independent runs out over a thread pool and
# returns a report with one pass flag per criterion

import Settings
import AssemblyHandler
import DiagnosticsHandler
import IonicHandler
import StepHandler
from MeshHandler import I1, I2, E
from log import log

settings = Settings.experiments

_sections = {name: Settings.SettingsDict() for name in ("certify", "spd", "stability", "mms", "deltaLimit", "apriori")}
_sections["certify"].updateDefaults({
  "vRange": [-10.0, 10.0],
  "wRange": [-10.0, 10.0],
  "samples": 201,
  "tolerance": 1e-12,
})
_sections["spd"].updateDefaults({
  "densities": [4, 8],
  "epsilons": [1.0, 0.1],
  "delta": 1e-3,
  "randomVectors": 100,
  "seed": 0,
})
_sections["stability"].updateDefaults({
  "perturbations": [1e-2, 1e-3],
  "profile": "sin(pi*x)*sin(pi*y)",
  "tolerance": 0.05,
  "horizonFactor": 2,
  "gronwallTolerance": 0.2,
})
_sections["mms"].updateDefaults({
  "densities": [8, 16, 32],
  "u1": "cos(pi*x)*cos(pi*y) + 1",
  "u2": "sin(pi*x)*cos(pi*y)",
  "ue": "cos(pi*x)*sin(pi*y)",
  "dt": 0.1,
  "slopeRange": [1.7, 2.3],
  "exactTolerance": 1e-9,
})
_sections["deltaLimit"].updateDefaults({
  "deltas": [1e-2, 1e-3, 1e-4],
})
_sections["apriori"].updateDefaults({
  "densities": [4, 8],
  "tolerance": 0.1,
  "poincareSamples": 20,
})
settings.updateDefaults(_sections)

# Symmetric 6-point rule on triangles, exact for degree 4. (barycentric point, weight)
DUNAVANT = [
  ((0.108103018168070, 0.445948490915965, 0.445948490915965), 0.223381589678011),
  ((0.445948490915965, 0.108103018168070, 0.445948490915965), 0.223381589678011),
  ((0.445948490915965, 0.445948490915965, 0.108103018168070), 0.223381589678011),
  ((0.816847572980459, 0.091576213509771, 0.091576213509771), 0.109951743655322),
  ((0.091576213509771, 0.816847572980459, 0.091576213509771), 0.109951743655322),
  ((0.091576213509771, 0.091576213509771, 0.816847572980459), 0.109951743655322),
]


class ExperimentRunner:
  """ Runs independent simulations on a pool of worker threads, results in submission order """

  def __init__(self, jobs=1):
    if jobs < 1:
      raise Settings.ConfigError("--jobs must be at least 1, got {}".format(jobs))
    self.jobs = jobs
    self.executor = ThreadPoolExecutor(max_workers=jobs)

  def map(self, function, items):
    futures = [self.executor.submit(function, item) for item in items]
    ThreadWait(futures)
    return [future.result() for future in futures]

  def close(self):
    self.executor.shutdown(wait=True)

  def __enter__(self):
    return self

  def __exit__(self, *exc):
    self.close()


@dataclass(frozen=True, eq=False)
class RunSpec:
  """ Everything one simulation needs: assembled operator, models, solver settings and initial data """
  op: AssemblyHandler.BlockOperator
  model: IonicHandler.IonicModel
  gap: IonicHandler.GapModel
  config: StepHandler.SolverConfig
  initial: StepHandler.InitialData

  def initialState(self, initial=None):
    return StepHandler.initialize(self.op, self.config, initial or self.initial)

  def simulate(self, state=None, config=None, nSteps=None, stride=1):
    config = config or self.config
    state = state if state is not None else self.initialState()
    return StepHandler.run(self.op, self.model, self.gap, config, state, stride=stride, nSteps=nSteps)


class PerturbedProfile(StepHandler.Profile):
  """ base + eta * shape """

  def __init__(self, base, eta, shape):
    self.name, self.source = base.name, base.source
    self.base, self.eta, self.shape = base, eta, shape
    self.constant, self.function = None, None

  def __call__(self, points, t=0.0):
    return self.base(points, t) + self.eta * self.shape(points, t)

  def isZero(self):
    return False


def _verdict(name, criteria, **details):
  return {"experiment": name, "passed": all(criteria.values()), "criteria": criteria, **details}


def _criteriaText(criteria):
  return "\n".join("  {:<32} {}".format(name, "pass" if ok else "FAIL") for name, ok in criteria.items())


def stateDistance(a, b, op, eps):
  """ sqrt(eps) L2 distance of the interface variables (v1, v2, w1, w2, s) """
  B = op.traceMass
  parts = {
    "v": eps * ((a.v1 - b.v1) @ (B["gamma1"] @ (a.v1 - b.v1)) + (a.v2 - b.v2) @ (B["gamma2"] @ (a.v2 - b.v2))),
    "w": eps * ((a.w1 - b.w1) @ (B["gamma1"] @ (a.w1 - b.w1)) + (a.w2 - b.w2) @ (B["gamma2"] @ (a.w2 - b.w2))),
    "s": eps * ((a.s - b.s) @ (B["gamma12"] @ (a.s - b.s))),
  }
  return {name: math.sqrt(max(value, 0.0)) for name, value in parts.items()}


@dataclass
class StabilityReport:
  perturbations: list
  horizon: float
  rows: list = field(default_factory=list)
  gronwallConstant: float = 0.0
  validationRatio: float = 0.0
  ratioSpread: float = 0.0
  criteria: dict = field(default_factory=dict)

  @property
  def passed(self):
    return all(self.criteria.values())

  def verdict(self):
    return _verdict("stability", self.criteria, gronwall_constant=self.gronwallConstant,
                    ratio_spread=self.ratioSpread, validation_ratio=self.validationRatio)

  def toText(self):
    lines = ["Stability under initial perturbations, horizon T = {:g}".format(self.horizon),
             "{:>10} {:>14} {:>14} {:>14} {:>14}".format("eta", "|dv(T)|", "|dw(T)|", "|ds(T)|", "ratio")]
    for row in self.rows:
      lines.append("{:>10.3g} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e}".format(
        row["eta"], row["dv"], row["dw"], row["ds"], row["ratio"]))
    lines.append("ratio spread {:.3e}, Gronwall C = {:.6g}, growth / exp(C t) on 2T = {:.4f}".format(
      self.ratioSpread, self.gronwallConstant, self.validationRatio))
    return "\n".join(lines) + "\n" + _criteriaText(self.criteria)


def stabilityExperiment(spec: RunSpec, perturbations, runner: ExperimentRunner, profile="sin(pi*x)*sin(pi*y)",
                        tolerance=0.05, horizonFactor=2, gronwallTolerance=0.2) -> StabilityReport:
  """
  Runs the base data and copies with v1, v2 moved by eta * profile.
  Amplification |delta(T)| / eta must not depend on eta, and the growth must fit exp(C t) with C taken
  from the first horizon and checked on horizonFactor times it
  """
  perturbations = [float(eta) for eta in perturbations]
  if len(perturbations) < 2 or any(eta <= 0 for eta in perturbations):
    raise Settings.ConfigError("stability needs at least two positive perturbation sizes, got {}".format(perturbations))
  shape = StepHandler.Profile(profile, "stability profile")
  config, op, eps = spec.config, spec.op, spec.config.eps
  steps = int(round((config.tEnd - 0.0) / config.dt))
  if steps < 1:
    raise Settings.ConfigError("stability horizon tEnd must cover at least one step")
  totalSteps = steps * int(horizonFactor)

  def simulate(eta):
    initial = spec.initial
    if eta is not None:
      initial = StepHandler.InitialData(v1=PerturbedProfile(initial.v1, eta, shape), v2=PerturbedProfile(initial.v2, eta, shape),
                                        s=initial.s, w1=initial.w1, w2=initial.w2)
    return spec.simulate(state=spec.initialState(initial), nSteps=totalSteps)

  base, zero, *perturbed = runner.map(simulate, [None, 0.0] + perturbations)
  report = StabilityReport(perturbations=perturbations, horizon=steps * config.dt)
  bitwise = all(np.array_equal(a.U, b.U) and np.array_equal(a.w1, b.w1) and np.array_equal(a.w2, b.w2)
                for a, b in zip(base.states, zero.states))

  ratios = []
  for eta, trajectory in zip(perturbations, perturbed):
    distance = stateDistance(trajectory.states[steps], base.states[steps], op, eps)
    ratio = math.sqrt(sum(value ** 2 for value in distance.values())) / eta
    ratios.append(ratio)
    report.rows.append({"eta": eta, "dv": distance["v"], "dw": distance["w"], "ds": distance["s"], "ratio": ratio})
  report.ratioSpread = (max(ratios) - min(ratios)) / max(max(ratios), 1e-300)

  # Growth of the smallest perturbation relative to its initial size
  smallest = perturbed[int(np.argmin(perturbations))]
  size = lambda index: math.sqrt(sum(value ** 2 for value in stateDistance(
    smallest.states[index], base.states[index], op, eps).values()))
  initial = size(0)
  growth = np.array([size(index) / initial if initial else 0.0 for index in range(totalSteps + 1)])
  times = np.array(smallest.times) - smallest.times[0]
  fitted = growth[1:steps + 1]
  with np.errstate(divide="ignore"):
    report.gronwallConstant = float(max(0.0, np.max(np.log(np.maximum(fitted, 1e-300)) / times[1:steps + 1])))
  report.validationRatio = float(np.max(growth[1:] / np.exp(report.gronwallConstant * times[1:])))
  report.criteria = {
    "ratio_agreement": report.ratioSpread <= tolerance,
    "zero_perturbation_bitwise": bitwise,
    "gronwall_validation": report.validationRatio <= 1 + gronwallTolerance,
  }
  log.info("Stability: ratios", ["{:.6g}".format(r) for r in ratios], "spread", report.ratioSpread,
           "Gronwall C", report.gronwallConstant)
  return report


@dataclass
class DeltaLimitReport:
  rows: list = field(default_factory=list)
  criteria: dict = field(default_factory=dict)

  @property
  def passed(self):
    return all(self.criteria.values())

  def verdict(self):
    return _verdict("delta-limit", self.criteria, distances=[row["distance"] for row in self.rows])

  def toText(self):
    lines = ["Regularization limit: distance between runs at delta and delta/2",
             "{:>10} {:>16}".format("delta", "distance")]
    lines += ["{:>10.3g} {:>16.6e}".format(row["delta"], row["distance"]) for row in self.rows]
    return "\n".join(lines) + "\n" + _criteriaText(self.criteria)


def deltaLimitExperiment(spec: RunSpec, deltas, runner: ExperimentRunner) -> DeltaLimitReport:
  """ d(delta) = |u^delta(T) - u^(delta/2)(T)| in L2 for decreasing delta """
  deltas = sorted((float(delta) for delta in deltas), reverse=True)
  if len(deltas) < 2 or deltas[-1] <= 0:
    raise Settings.ConfigError("delta-limit needs at least two positive deltas, got {}".format(deltas))
  start = spec.initialState()
  values = sorted(set(deltas + [delta / 2 for delta in deltas]), reverse=True)
  finals = dict(zip(values, runner.map(lambda delta: spec.simulate(start, spec.config.replace(delta=delta)).finalState, values)))
  report = DeltaLimitReport()
  for delta in deltas:
    difference = finals[delta].U - finals[delta / 2].U
    report.rows.append({"delta": delta, "distance": math.sqrt(max(difference @ (spec.op.volumeMass @ difference), 0.0))})
  distances = [row["distance"] for row in report.rows]
  report.criteria = {"strictly_decreasing": all(a > b for a, b in zip(distances, distances[1:]))}
  log.info("Delta limit distances:", distances)
  return report


@dataclass
class AprioriComparison:
  densities: list
  reports: list
  differences: list = field(default_factory=list)
  tolerance: float = 0.1
  poincare: list = field(default_factory=list) # estimated Poincare-trace constant per density
  criteria: dict = field(default_factory=dict)

  @property
  def passed(self):
    return all(self.criteria.values())

  def verdict(self):
    return _verdict("apriori", self.criteria, differences=self.differences, poincare_constants=self.poincare)

  def rows(self):
    rows = []
    for density, report in zip(self.densities, self.reports):
      rows += [{"density": density, **row} for row in report.rows()]
    for density, constant in zip(self.densities, self.poincare):
      rows.append({"density": density, "monitor": "poincare_constant", "value": repr(float(constant))})
    return rows

  def toText(self):
    names = list(self.reports[0].monitors())
    lines = ["A-priori monitors by mesh density", "{:>8} ".format("density") + " ".join("{:>16}".format(n) for n in names)]
    for density, report in zip(self.densities, self.reports):
      lines.append("{:>8} ".format(density) + " ".join("{:>16.6e}".format(v) for v in report.monitors().values()))
    for density, constant in zip(self.densities, self.poincare):
      lines.append("Poincare-trace constant at density {}: {:.6e}".format(density, constant))
    return "\n".join(lines) + "\n" + _criteriaText(self.criteria)


def aprioriComparison(specs, densities, runner: ExperimentRunner, tolerance=0.1, poincareSamples=0) -> AprioriComparison:
  """
  Same data on successively refined meshes; every monitor must agree within tolerance.
  With poincareSamples > 0 the Poincare-trace constant is also estimated on every mesh
  """
  reports = runner.map(lambda spec: DiagnosticsHandler.aprioriMonitor(spec.simulate()), specs)
  comparison = AprioriComparison(densities=list(densities), reports=reports, tolerance=tolerance)
  comparison.differences = [coarse.compare(fine) for coarse, fine in zip(reports, reports[1:])]
  comparison.criteria = {
    "mesh_independent": all(value < tolerance for difference in comparison.differences for value in difference.values()),
    "duality_bound": all(report.dualityPassed for report in reports),
  }
  if poincareSamples > 0:
    comparison.poincare = runner.map(
      lambda spec: DiagnosticsHandler.poincareConstant(spec.op, spec.config.eps, samples=poincareSamples), specs)
    comparison.criteria["poincare_finite"] = all(0 < c < math.inf for c in comparison.poincare)
  return comparison


@dataclass
class SpdCase:
  density: int
  eps: float
  delta: float
  strict: AssemblyHandler.SpdReport
  semidefinite: AssemblyHandler.SpdReport
  decompositionError: float

  def line(self):
    if self.delta > 0:
      result = str(self.strict)
    else:
      result = "semidefinite: {}, strict: {}".format("pass" if self.semidefinite.passed else "fail",
                                                     "pass" if self.strict.passed else "fail")
    return "density={} eps={:g} delta={:g}: {} (decomposition error {:.2e})".format(
      self.density, self.eps, self.delta, result, self.decompositionError)


@dataclass
class SpdExperimentReport:
  cases: list = field(default_factory=list)
  criteria: dict = field(default_factory=dict)

  @property
  def passed(self):
    return all(self.criteria.values())

  def verdict(self):
    return _verdict("spd", self.criteria)

  def rows(self):
    return [{"density": c.density, "eps": repr(c.eps), "delta": repr(c.delta), "strict": "pass" if c.strict.passed else "fail",
             "min_pivot": repr(c.strict.value), "semidefinite": "pass" if c.semidefinite.passed else "fail",
             "min_ritz": repr(c.semidefinite.value), "decomposition_error": repr(c.decompositionError)} for c in self.cases]

  def toText(self):
    return "\n".join(case.line() for case in self.cases) + "\n" + _criteriaText(self.criteria)


def decompositionError(op, eps, delta, cRatio, vectors):
  """
  Largest relative mismatch between d^T M d and the facet-by-facet expansion
  delta (|d|^2 volume + traces + gating) + eps (|[d]|^2 on gamma1, gamma2 and cRatio on gamma12)
  """
  matrix = AssemblyHandler.lemmaMatrix(op, eps, delta, cRatio)
  n = op.mesh.nVertices
  worst = 0.0
  for d in vectors:
    U, w1, w2 = d[:n], d[op.layout.w1], d[op.layout.w2]
    expected = (delta * (U @ (op.volumeMass @ U) + U @ (op.sideMass @ U)) + w1 @ (op.traceMass["gamma1"] @ w1)
                + w2 @ (op.traceMass["gamma2"] @ w2) + eps * math.fsum(AssemblyHandler.interfaceQuadraticTerms(op.mesh, U, cRatio)))
    actual = d @ (matrix @ d)
    worst = max(worst, abs(actual - expected) / max(abs(expected), 1e-300))
  return worst


def spdExperiment(build, densities, epsilons, delta, runner: ExperimentRunner, cRatio=0.5, randomVectors=100,
                  seed=0) -> SpdExperimentReport:
  """
  :param build: callable density -> BlockOperator
  With delta > 0 the regularized operator must be strictly positive definite. With delta = 0 it must be
  semidefinite and fail the strict check, since constants are in its kernel
  """
  def check(case):
    density, eps = case
    op = build(density)
    matrix = AssemblyHandler.lemmaMatrix(op, eps, delta, cRatio)
    rng = np.random.default_rng(seed)
    vectors = rng.standard_normal((randomVectors, op.layout.size))
    return SpdCase(density, eps, delta, AssemblyHandler.checkSpd(matrix, "strict"),
                   AssemblyHandler.checkSpd(matrix, "semidefinite"), decompositionError(op, eps, delta, cRatio, vectors))

  report = SpdExperimentReport(cases=runner.map(check, [(d, e) for d in densities for e in epsilons]))
  expected = (lambda c: c.strict.passed) if delta > 0 else (lambda c: c.semidefinite.passed and not c.strict.passed)
  report.criteria = {
    "definiteness": all(expected(case) for case in report.cases),
    "decomposition": all(case.decompositionError <= 1e-12 for case in report.cases),
  }
  for case in report.cases:
    log.info(case.line())
  return report


_x, _y = sympy.symbols("x y")


def _compile(expression):
  function = sympy.lambdify((_x, _y), expression, "numpy")
  return lambda X: np.array(np.broadcast_to(function(X[:, 0], X[:, 1]), (len(X),)), dtype=float)


@dataclass(frozen=True, eq=False)
class ManufacturedSolution:
  """ Exact potentials per subdomain with their fluxes and volume sources for constant tensors """
  fields: tuple # sympy expressions for I1, I2, E
  tensors: tuple

  @classmethod
  def parse(cls, u1, u2, ue, conductivity):
    fields = []
    for name, text in (("u1", u1), ("u2", u2), ("ue", ue)):
      try:
        expression = sympy.sympify(text, locals={"x": _x, "y": _y})
      except (sympy.SympifyError, SyntaxError, TypeError) as e:
        raise Settings.ConfigError("Cannot parse manufactured {} = {!r}: {}".format(name, text, e)) from None
      if expression.free_symbols - {_x, _y}:
        raise Settings.ConfigError("Manufactured {} may only use x and y".format(name))
      fields.append(expression)
    return cls(tuple(fields), tuple(conductivity.byTag(tag) for tag in (I1, I2, E)))

  def value(self, tag):
    return _compile(self.fields[tag])

  def flux(self, tag):
    """ M grad u as two callables """
    M = sympy.Matrix(self.tensors[tag].tolist())
    u = self.fields[tag]
    flux = M * sympy.Matrix([sympy.diff(u, _x), sympy.diff(u, _y)])
    return _compile(flux[0]), _compile(flux[1])

  def source(self, tag):
    M = sympy.Matrix(self.tensors[tag].tolist())
    u = self.fields[tag]
    flux = M * sympy.Matrix([sympy.diff(u, _x), sympy.diff(u, _y)])
    return _compile(-(sympy.diff(flux[0], _x) + sympy.diff(flux[1], _y)))


def _facetPoints(vertices, nodes):
  p0, p1 = vertices[nodes[:, 0]], vertices[nodes[:, 1]]
  return [(p0 + tau * (p1 - p0), tau, weight) for tau, weight in zip(DiagnosticsHandler.GAUSS_NODES,
                                                                       DiagnosticsHandler.GAUSS_WEIGHTS)]


def _addFacetLoad(load, vertices, nodes, lengths, function):
  for X, tau, weight in _facetPoints(vertices, nodes):
    value = weight * lengths * function(X)
    np.add.at(load, nodes[:, 0], value * (1 - tau))
    np.add.at(load, nodes[:, 1], value * tau)


def manufacturedLoad(op, exact: ManufacturedSolution, alpha, alphaGap):
  """
  Right-hand side for which the exact fields solve the step operator:
  volume sources, interface currents from both sides and the outer flux
  """
  mesh = op.mesh
  vertices = mesh.vertices
  load = np.zeros(mesh.nVertices)
  for tag in (I1, I2, E):
    triangles = mesh.triangles[mesh.tags == tag]
    areas = mesh.areas[mesh.tags == tag]
    points = vertices[triangles]
    source = exact.source(tag)
    for weights, w in DUNAVANT:
      X = np.einsum("i,tij->tj", weights, points)
      value = w * areas * source(X)
      for corner in range(3):
        np.add.at(load, triangles[:, corner], value * weights[corner])

  value = [exact.value(tag) for tag in (I1, I2, E)]
  flux = [exact.flux(tag) for tag in (I1, I2, E)]
  normalFlux = lambda tag, normals: lambda X: flux[tag][0](X) * normals[:, 0] + flux[tag][1](X) * normals[:, 1]
  for name, inner, outer, coefficient in (("gamma1", I1, E, alpha), ("gamma2", I2, E, alpha), ("gamma12", I1, I2, alphaGap)):
    facets = mesh.facets[name]
    jump = lambda X, i=inner, o=outer: value[i](X) - value[o](X)
    innerFlux, outerFlux = normalFlux(inner, facets.normals), normalFlux(outer, facets.normals)
    _addFacetLoad(load, vertices, facets.inner, facets.lengths,
                  lambda X, f=innerFlux, j=jump, c=coefficient: f(X) + c * j(X))
    _addFacetLoad(load, vertices, facets.outer, facets.lengths,
                  lambda X, f=outerFlux, j=jump, c=coefficient: -f(X) - c * j(X))
  exterior = mesh.exterior
  _addFacetLoad(load, vertices, exterior.nodes, exterior.lengths, normalFlux(E, exterior.normals))
  return load


def meshSize(mesh):
  p = mesh.vertices[mesh.triangles]
  edges = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
  return float(np.max(np.hypot(edges[..., 0], edges[..., 1])))


def manufacturedErrors(op, exact: ManufacturedSolution, U):
  """ :return: (L2 error of the potentials over all subdomains, L2 error of v on both membranes) """
  mesh = op.mesh
  total = 0.0
  for tag in (I1, I2, E):
    triangles = mesh.triangles[mesh.tags == tag]
    areas = mesh.areas[mesh.tags == tag]
    points = mesh.vertices[triangles]
    function = exact.value(tag)
    for weights, w in DUNAVANT:
      X = np.einsum("i,tij->tj", weights, points)
      discrete = U[triangles] @ np.asarray(weights)
      total += math.fsum(w * areas * (discrete - function(X)) ** 2)
  membrane = 0.0
  for name, inner, outer in (("gamma1", I1, E), ("gamma2", I2, E)):
    facets = mesh.facets[name]
    exactJump = lambda X: exact.value(inner)(X) - exact.value(outer)(X)
    jump = U[facets.inner] - U[facets.outer]
    for X, tau, weight in _facetPoints(mesh.vertices, facets.inner):
      discrete = jump[:, 0] * (1 - tau) + jump[:, 1] * tau
      membrane += math.fsum(weight * facets.lengths * (discrete - exactJump(X)) ** 2)
  return math.sqrt(total), math.sqrt(membrane)


def manufacturedSolve(op, exact, eps, dt, beta1, gap):
  """ One solve of the step operator (delta = 0) against the manufactured load """
  system = AssemblyHandler.buildSystemMatrix(op, eps, 0.0, dt, beta1, gap.gGap, gap.cRatio)
  k = system.coefficients
  load = manufacturedLoad(op, exact, k["capacitive"] + k["ionic"], k["gapCapacitive"] + k["gapResistive"])
  mean = 0.0
  triangles = op.mesh.triangles[op.mesh.tags == E]
  areas = op.mesh.areas[op.mesh.tags == E]
  points = op.mesh.vertices[triangles]
  function = exact.value(E)
  for weights, w in DUNAVANT:
    mean += math.fsum(w * areas * function(np.einsum("i,tij->tj", weights, points)))
  solution = spla.splu(system.bordered()).solve(np.concatenate([load, [mean]]))
  return solution[:-1]


@dataclass
class MmsReport:
  rows: list = field(default_factory=list)
  slope: float = math.nan
  slopeV: float = math.nan
  slopeRange: tuple = (1.7, 2.3)
  criteria: dict = field(default_factory=dict)

  @property
  def passed(self):
    return all(self.criteria.values())

  def verdict(self):
    return _verdict("mms", self.criteria, slope=self.slope, slope_v=self.slopeV)

  def toText(self):
    lines = ["Manufactured solution convergence", "{:>8} {:>12} {:>16} {:>16}".format("density", "h", "error_u", "error_v")]
    lines += ["{:>8} {:>12.5g} {:>16.6e} {:>16.6e}".format(r["density"], r["h"], r["error_u"], r["error_v"]) for r in self.rows]
    lines.append("fitted slope u: {:.4f}, v: {:.4f} (accepted range {} to {})".format(self.slope, self.slopeV, *self.slopeRange))
    return "\n".join(lines) + "\n" + _criteriaText(self.criteria)


def mmsConvergence(build, exact: ManufacturedSolution, densities, eps, dt, beta1, gap, runner: ExperimentRunner,
                   slopeRange=(1.7, 2.3), exactTolerance=None) -> MmsReport:
  """
  :param build: callable density -> BlockOperator with piecewise constant tensors
  :param exactTolerance: when set, the fields are expected to be reproduced exactly (constants, piecewise linears)
  """
  densities = sorted(int(d) for d in densities)

  def solve(density):
    op = build(density)
    U = manufacturedSolve(op, exact, eps, dt, beta1, gap)
    errorU, errorV = manufacturedErrors(op, exact, U)
    return {"density": density, "h": meshSize(op.mesh), "error_u": errorU, "error_v": errorV}

  report = MmsReport(rows=runner.map(solve, densities), slopeRange=tuple(slopeRange))
  if exactTolerance is not None:
    report.criteria = {"exact_reproduction": all(r["error_u"] <= exactTolerance and r["error_v"] <= exactTolerance
                                                 for r in report.rows)}
    return report
  if len(densities) < 2:
    raise Settings.ConfigError("mms needs at least two densities to fit a slope")
  h = np.log([r["h"] for r in report.rows])
  report.slope = float(np.polyfit(h, np.log([r["error_u"] for r in report.rows]), 1)[0])
  report.slopeV = float(np.polyfit(h, np.log([r["error_v"] for r in report.rows]), 1)[0])
  report.criteria = {"slope_in_range": slopeRange[0] <= report.slope <= slopeRange[1]}
  log.info("MMS slope", report.slope, "over densities", densities)
  return report
