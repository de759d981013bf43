import math, time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import sympy

# Linearly implicit Euler for the coupled interface system. Gating first with the old potential,
# then one symmetric bordered solve for all potentials

import Settings
import AssemblyHandler
import IonicHandler
import MeshHandler
from log import log

settings = Settings.solver
initialSettings = Settings.initial

iappSettings = Settings.SettingsDict()
iappSettings.updateDefaults({
  "gamma1": {"kind": "zero"},
  "gamma2": {"kind": "zero"},
})

settings.updateDefaults({
  "eps": 1.0,
  "delta": 0.0,
  "dt": 0.01,
  "tEnd": 0.1,
  "linTol": 1e-10,
  "linMaxit": 500,
  "gatingScheme": "explicit_euler",
  "linSolver": "direct",
  "ionicMode": "fhn",
  "iapp": iappSettings,
})

initialSettings.updateDefaults({
  "v1": 0.0,
  "v2": 0.0,
  "s": 0.0,
  "w1": 0.0,
  "w2": 0.0,
})

LINEAR_SOLVERS = ("direct", "cg")
IAPP_KINDS = ("zero", "constant", "pulse", "expression")
MAX_REFINEMENTS = 3


class SolverFailure(RuntimeError):
  def __init__(self, message, report=None, residual=math.nan, time=math.nan):
    super().__init__(message)
    self.report = report
    self.residual = residual
    self.time = time


class DivergenceError(SolverFailure):
  pass


_x, _y, _t = sympy.symbols("x y t")


class Profile:
  """ A number or an expression in x, y (and t) evaluated at nodes """

  def __init__(self, value, name="profile"):
    self.name = name
    self.source = value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
      self.constant = float(value)
      self.function = None
      return
    if not isinstance(value, str):
      raise Settings.ConfigError("'{}' must be a number or an expression string, got {!r}".format(name, value))
    try:
      expression = sympy.sympify(value, locals={"x": _x, "y": _y, "t": _t})
    except (sympy.SympifyError, SyntaxError, TypeError) as e:
      raise Settings.ConfigError("Cannot parse '{}' = {!r}: {}".format(name, value, e)) from None
    unknown = expression.free_symbols - {_x, _y, _t}
    if unknown:
      raise Settings.ConfigError("'{}' uses unknown symbols {}".format(name, sorted(str(i) for i in unknown)))
    self.constant = float(expression) if not expression.free_symbols else None
    self.function = None if self.constant is not None else sympy.lambdify((_x, _y, _t), expression, "numpy")

  def __call__(self, points, t=0.0):
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if self.function is None:
      return np.full(len(points), self.constant)
    values = self.function(points[:, 0], points[:, 1], t)
    return np.array(np.broadcast_to(values, (len(points),)), dtype=float)

  def isZero(self):
    return self.constant == 0.0


@dataclass(frozen=True)
class AppliedCurrent:
  kind: str = "zero"
  amplitude: float = 0.0
  start: float = 0.0
  duration: float = math.inf
  expression: str = "0"

  def __post_init__(self):
    if self.kind not in IAPP_KINDS:
      raise Settings.ConfigError("iapp kind must be one of {}, got '{}'".format(IAPP_KINDS, self.kind))
    if self.duration < 0:
      raise Settings.ConfigError("iapp duration must be nonnegative, got {}".format(self.duration))

  @classmethod
  def fromDict(cls, data, name):
    if not isinstance(data, dict):
      raise Settings.ConfigError("iapp.{} must be a table, got {!r}".format(name, data))
    allowed = {"kind", "amplitude", "start", "duration", "expression"}
    for key in data:
      if key not in allowed:
        raise Settings.ConfigError("Unknown key '{}' in section [solver.iapp.{}]".format(key, name))
    return cls(**data)

  @cached_property
  def profile(self):
    return Profile(self.expression, "iapp expression")

  def __call__(self, points, t):
    n = len(points)
    if self.kind == "zero":
      return np.zeros(n)
    if self.kind == "constant":
      return np.full(n, float(self.amplitude))
    if self.kind == "pulse":
      active = self.start <= t < self.start + self.duration
      return np.full(n, float(self.amplitude) if active else 0.0)
    return self.profile(points, t)


@dataclass(frozen=True)
class SolverConfig:
  eps: float = 1.0
  delta: float = 0.0
  dt: float = 0.01
  tEnd: float = 0.1
  linTol: float = 1e-10
  linMaxit: int = 500
  gatingScheme: str = "explicit_euler"
  linSolver: str = "direct"
  ionicMode: str = "fhn"
  iapp: dict = field(default_factory=lambda: {"gamma1": AppliedCurrent(), "gamma2": AppliedCurrent()})

  def __post_init__(self):
    if not (self.dt > 0 and self.eps > 0 and self.delta >= 0 and self.tEnd >= 0):
      raise Settings.ConfigError("solver needs dt > 0, eps > 0, delta >= 0, tEnd >= 0")
    if not 0 < self.linTol < 1:
      raise Settings.ConfigError("linTol must lie in (0, 1), got {}".format(self.linTol))
    if self.gatingScheme not in IonicHandler.GATING_SCHEMES:
      raise Settings.ConfigError("gatingScheme must be one of {}".format(IonicHandler.GATING_SCHEMES))
    if self.linSolver not in LINEAR_SOLVERS:
      raise Settings.ConfigError("linSolver must be one of {}".format(LINEAR_SOLVERS))
    if self.ionicMode not in IonicHandler.IONIC_MODES:
      raise Settings.ConfigError("ionicMode must be one of {}".format(IonicHandler.IONIC_MODES))
    iapp = {"gamma1": AppliedCurrent(), "gamma2": AppliedCurrent()}
    iapp.update(self.iapp)
    object.__setattr__(self, "iapp", iapp)

  @classmethod
  def fromSettings(cls, section):
    values = Settings.plain(section)
    iapp = {name: AppliedCurrent.fromDict(data, name) for name, data in values.pop("iapp").items()}
    return cls(iapp=iapp, **values)

  def replace(self, **changes):
    values = {name: getattr(self, name) for name in self.__dataclass_fields__}
    values.update(changes)
    return self.__class__(**values)


@dataclass(frozen=True)
class InitialData:
  v1: object = 0.0
  v2: object = 0.0
  s: object = 0.0
  w1: object = 0.0
  w2: object = 0.0

  def __post_init__(self):
    for name in ("v1", "v2", "s", "w1", "w2"):
      value = getattr(self, name)
      if not isinstance(value, Profile):
        object.__setattr__(self, name, Profile(value, name))

  @classmethod
  def fromSettings(cls, section):
    return cls(**Settings.plain(section))


@dataclass(frozen=True, eq=False)
class SystemState:
  t: float
  U: np.ndarray # all potentials in mesh vertex numbering
  w1: np.ndarray
  w2: np.ndarray
  layout: AssemblyHandler.DofLayout

  def __post_init__(self):
    for name in ("U", "w1", "w2"):
      array = np.array(getattr(self, name), dtype=float)
      array.flags.writeable = False
      object.__setattr__(self, name, array)

  @property
  def u1(self):
    return self.U[self.layout.u1]

  @property
  def u2(self):
    return self.U[self.layout.u2]

  @property
  def ue(self):
    return self.U[self.layout.ue]

  @cached_property
  def v1(self):
    return self.layout.differences["gamma1"] @ self.U

  @cached_property
  def v2(self):
    return self.layout.differences["gamma2"] @ self.U

  @cached_property
  def s(self):
    return self.layout.differences["gamma12"] @ self.U

  def vector(self):
    """ Full unknown vector (u1, u2, ue, w1, w2) """
    return np.concatenate([self.U, self.w1, self.w2])

  def isFinite(self):
    return bool(np.all(np.isfinite(self.U)) and np.all(np.isfinite(self.w1)) and np.all(np.isfinite(self.w2)))

  def shifted(self, constant):
    """ Same state with every potential moved by a constant """
    return SystemState(self.t, self.U + constant, self.w1, self.w2, self.layout)


@dataclass
class StepReport:
  time: float
  iterations: int
  residual: float
  converged: bool
  fluxBalance: dict
  fluxScale: float
  maxChange: float
  multiplier: float = 0.0
  tolerance: float = 1e-10

  @property
  def fluxBalanced(self):
    return all(abs(value) <= 10 * self.tolerance * self.fluxScale for value in self.fluxBalance.values())

  def __str__(self):
    flux = ", ".join("{}={:.3e}".format(k, v) for k, v in self.fluxBalance.items())
    return "t={:.6g} iterations={} residual={:.3e} converged={} max change={:.3e} flux[{}]".format(
      self.time, self.iterations, self.residual, self.converged, self.maxChange, flux)


def tracePoints(op, name):
  return op.mesh.vertices[op.mesh.facets[name].innerNodes]


def meanExtracellular(state, op):
  return float(op.constraint @ state.U)


def projectMeanZero(state, op):
  """ Shifts all potentials by the constant that makes the extracellular integral vanish """
  c = op.constraint
  return state.shifted(-(c @ state.U) / c.sum())


def scaledNorms(state, op, eps):
  """ sqrt(eps)-scaled L2 norms of the interface data """
  B = op.traceMass
  return {
    "v1": math.sqrt(max(eps * state.v1 @ (B["gamma1"] @ state.v1), 0.0)),
    "v2": math.sqrt(max(eps * state.v2 @ (B["gamma2"] @ state.v2), 0.0)),
    "s": math.sqrt(max(eps * state.s @ (B["gamma12"] @ state.s), 0.0)),
    "w1": math.sqrt(max(eps * state.w1 @ (B["gamma1"] @ state.w1), 0.0)),
    "w2": math.sqrt(max(eps * state.w2 @ (B["gamma2"] @ state.w2), 0.0)),
  }


def initialize(op: AssemblyHandler.BlockOperator, config: SolverConfig, initial: InitialData) -> SystemState:
  """
  Sets membrane traces from v1 and v2 everywhere, and the gap trace from s except where gamma1, gamma2 and
  gamma12 meet (there it is v1 - v2). Interior potentials minimize the stiffness energy under those
  constraints and the mean-zero condition
  """
  mesh, layout = op.mesh, op.layout
  v1 = initial.v1(tracePoints(op, "gamma1"))
  v2 = initial.v2(tracePoints(op, "gamma2"))
  s = initial.s(tracePoints(op, "gamma12"))
  free = ~np.isin(mesh.gamma12.innerNodes, mesh.gamma1.innerNodes)
  D = layout.differences
  C = sp.vstack([D["gamma1"], D["gamma2"], D["gamma12"][free]]).tocsr()
  g = np.concatenate([v1, v2, s[free]])
  c = sp.csr_matrix(op.constraint[None, :])
  kkt = sp.bmat([[op.stiffness, C.T, c.T], [C, None, None], [c, None, None]], format="csc")
  rhs = np.concatenate([np.zeros(mesh.nVertices), g, [0.0]])

  solution = spla.splu(kkt).solve(rhs)
  scale = max(np.linalg.norm(rhs), 1e-300)
  residual = float(np.linalg.norm(kkt @ solution - rhs) / scale) if np.any(rhs) else float(np.linalg.norm(kkt @ solution))
  if not residual <= config.linTol or not np.all(np.isfinite(solution)):
    raise SolverFailure("initial elliptic solve failed with residual {:.3e}".format(residual), residual=residual, time=0.0)

  state = SystemState(0.0, solution[:mesh.nVertices], initial.w1(tracePoints(op, "gamma1")),
                      initial.w2(tracePoints(op, "gamma2")), layout)
  mismatch = np.abs(state.s - s)[~free]
  if mismatch.size and mismatch.max() > config.linTol * max(1.0, np.abs(s).max()):
    log.warning("Gap data disagrees with v1 - v2 at", int(np.sum(mismatch > config.linTol)),
                "junction corners, max difference", mismatch.max())
  norms = scaledNorms(state, op, config.eps)
  log.info("Initial data scaled norms:", ", ".join("{}={:.6g}".format(k, v) for k, v in norms.items()))
  return state


class Stepper:
  """ Holds the factorized step matrix for one (operator, model, config) combination """

  def __init__(self, op, model, gap, config: SolverConfig):
    self.op, self.model, self.gap, self.config = op, model, gap, config
    self.system = AssemblyHandler.buildSystemMatrix(op, config.eps, config.delta, config.dt, model.beta1,
                                                    gap.gGap, gap.cRatio)
    self.points = {name: tracePoints(op, name) for name in ("gamma1", "gamma2")}
    self.regularization = op.volumeMass + op.sideMass
    self.appliedNormSquared = 0.0
    if config.linSolver == "direct":
      self.lu = spla.splu(self.system.bordered())
    else:
      self.lu = None
      self.diagonal = self.system.matrix.diagonal()
    self.regions = self._regionIndicators()

  def _regionIndicators(self):
    mesh = self.op.mesh
    regions = {}
    for name, tag in (("intra1", MeshHandler.I1), ("intra2", MeshHandler.I2), ("extra", MeshHandler.E)):
      count, labels = MeshHandler.components(mesh, tag)
      cols = np.arange(mesh.block(tag).start, mesh.block(tag).stop)
      regions[name] = sp.csr_matrix((np.ones(len(cols)), (labels, cols)), shape=(count, mesh.nVertices))
    return regions

  def _solveDirect(self, rhs):
    A = self.system.bordered()
    full = np.concatenate([rhs, [0.0]])
    scale = np.linalg.norm(full)
    x = self.lu.solve(full)
    residual = np.linalg.norm(A @ x - full) / scale if scale else np.linalg.norm(A @ x)
    refinements = 0
    while residual > self.config.linTol and refinements < MAX_REFINEMENTS:
      x = x + self.lu.solve(full - A @ x)
      residual = np.linalg.norm(A @ x - full) / scale if scale else np.linalg.norm(A @ x)
      refinements += 1
    return x[:-1], float(x[-1]), float(residual), refinements + 1

  def _solveProjected(self, rhs):
    """ Conjugate gradients on the operator restricted to the constraint's null space """
    A, c = self.system.matrix, self.system.constraint
    n = len(rhs)
    project = lambda x: x - c * (c @ x) / (c @ c)
    operator = spla.LinearOperator((n, n), matvec=lambda x: project(A @ project(x)), dtype=float)
    preconditioner = spla.LinearOperator((n, n), matvec=lambda x: project(project(x) / self.diagonal), dtype=float)
    b = project(rhs)
    scale = np.linalg.norm(b)
    if not scale:
      return np.zeros(n), 0.0, 0.0, 0
    iterations = [0]
    def count(_):
      iterations[0] += 1
    U, info = spla.cg(operator, b, rtol=self.config.linTol, atol=0.0, maxiter=self.config.linMaxit,
                      M=preconditioner, callback=count)
    U = project(U)
    multiplier = float(c @ (rhs - A @ U) / (c @ c))
    residual = float(np.linalg.norm(project(A @ U - rhs)) / scale)
    return U, multiplier, residual, iterations[0]

  def sources(self, state, w1, w2):
    """ Explicit membrane source per trace node: old-potential ionic part plus recovery minus applied current """
    model, mode, t = self.model, self.config.ionicMode, state.t
    iapp = self.config.iapp
    src1 = (IonicHandler.explicitCurrent(model, state.v1, mode) + IonicHandler.recoveryCurrent(model, w1, mode)
            - iapp["gamma1"](self.points["gamma1"], t))
    src2 = (IonicHandler.explicitCurrent(model, state.v2, mode) + IonicHandler.recoveryCurrent(model, w2, mode)
            - iapp["gamma2"](self.points["gamma2"], t))
    return src1, src2

  def step(self, state: SystemState):
    cfg, op, model = self.config, self.op, self.model
    dt, eps = cfg.dt, cfg.eps
    B, D = op.traceMass, op.layout.differences
    w1 = IonicHandler.advanceGating(model, state.v1, state.w1, dt, cfg.gatingScheme, cfg.ionicMode)
    w2 = IonicHandler.advanceGating(model, state.v2, state.w2, dt, cfg.gatingScheme, cfg.ionicMode)
    src1, src2 = self.sources(state, w1, w2)
    for name in ("gamma1", "gamma2"):
      applied = cfg.iapp[name](self.points[name], state.t)
      self.appliedNormSquared += dt * eps * applied @ (B[name] @ applied)

    rhs = (eps / dt * (D["gamma1"].T @ (B["gamma1"] @ (state.v1 - dt * src1))
                       + D["gamma2"].T @ (B["gamma2"] @ (state.v2 - dt * src2)))
           + self.gap.cRatio * eps / dt * (D["gamma12"].T @ (B["gamma12"] @ state.s)))
    if cfg.delta:
      rhs = rhs + cfg.delta / dt * (self.regularization @ state.U)

    if self.lu is not None:
      U, multiplier, residual, iterations = self._solveDirect(rhs)
    else:
      U, multiplier, residual, iterations = self._solveProjected(rhs)
    new = SystemState(state.t + dt, U, w1, w2, op.layout)

    change = max(np.max(np.abs(new.U - state.U), initial=0.0), np.max(np.abs(w1 - state.w1), initial=0.0),
                 np.max(np.abs(w2 - state.w2), initial=0.0))
    report = StepReport(time=new.t, iterations=iterations, residual=residual, converged=residual <= cfg.linTol,
                        fluxBalance=self.fluxBalance(state, new, src1, src2, multiplier),
                        fluxScale=max(1.0, float(np.linalg.norm(new.U)), float(np.linalg.norm(rhs))),
                        maxChange=float(change), multiplier=multiplier, tolerance=cfg.linTol)
    if not new.isFinite():
      raise DivergenceError("non-finite values after step to t={:.6g}".format(new.t), report, residual, new.t)
    if not report.converged:
      raise SolverFailure("linear solve stagnated at residual {:.3e}".format(residual), report, residual, new.t)
    return new, report

  def fluxBalance(self, old, new, src1, src2, multiplier):
    """
    Net current out of every connected region, from the interface currents of the step.
    Each region reports its worst component
    """
    cfg, op, model = self.config, self.op, self.model
    B, D = op.traceMass, op.layout.differences
    dt, eps = cfg.dt, cfg.eps
    membrane1 = eps * ((new.v1 - old.v1) / dt + model.beta1 * new.v1 + src1)
    membrane2 = eps * ((new.v2 - old.v2) / dt + model.beta1 * new.v2 + src2)
    junction = eps * self.gap.cRatio * ((new.s - old.s) / dt + self.gap.gGap * new.s)
    nodal = (D["gamma1"].T @ (B["gamma1"] @ membrane1) + D["gamma2"].T @ (B["gamma2"] @ membrane2)
             + D["gamma12"].T @ (B["gamma12"] @ junction) + multiplier * op.constraint)
    if cfg.delta:
      nodal = nodal + cfg.delta / dt * (self.regularization @ (new.U - old.U))
    return {name: float(np.max(np.abs(indicator @ nodal), initial=0.0)) for name, indicator in self.regions.items()}


def step(state, op, model, gap, config):
  """ One step with a freshly factorized matrix. Use a Stepper to reuse the factorization """
  return Stepper(op, model, gap, config).step(state)


@dataclass
class Trajectory:
  op: AssemblyHandler.BlockOperator
  model: IonicHandler.IonicModel
  gap: IonicHandler.GapModel
  config: SolverConfig
  stride: int = 1
  times: list = field(default_factory=list)
  states: list = field(default_factory=list)
  reports: list = field(default_factory=list)
  probes: dict = field(default_factory=dict)
  appliedNorm: float = 0.0
  wallTime: float = 0.0

  @property
  def finalState(self):
    return self.states[-1]

  def record(self, state, report, probes):
    self.times.append(state.t)
    self.states.append(state)
    self.reports.append(report)
    for name, probe in probes.items():
      self.probes.setdefault(name, []).append(probe(state))


def run(op, model, gap, config: SolverConfig, state: SystemState, probes=None, stride=1, nSteps=None,
        stepper=None) -> Trajectory:
  """
  Steps from state to config.tEnd (or for nSteps steps), recording every stride-th state
  :param probes: dict of name -> callable(state), evaluated on every recorded state
  """
  probes = probes or {}
  if nSteps is None:
    nSteps = int(round((config.tEnd - state.t) / config.dt))
    if nSteps < 1:
      raise Settings.ConfigError("tEnd {} leaves no time step of size {} after t={}".format(config.tEnd, config.dt, state.t))
  if stride < 1:
    raise Settings.ConfigError("stride must be >= 1, got {}".format(stride))
  stepper = stepper or Stepper(op, model, gap, config)
  trajectory = Trajectory(op=op, model=model, gap=gap, config=config, stride=stride)
  started = time.perf_counter()
  trajectory.record(state, None, probes)
  for index in range(1, nSteps + 1):
    try:
      state, report = stepper.step(state)
    except SolverFailure as e:
      e.time = state.t + config.dt
      log.error("Step", index, "failed at t =", e.time, ":", e, "|", e.report)
      raise
    if index % stride == 0 or index == nSteps:
      trajectory.record(state, report, probes)
    log.debug(report)
  trajectory.appliedNorm = math.sqrt(stepper.appliedNormSquared)
  trajectory.wallTime = time.perf_counter() - started
  log.info("Ran", nSteps, "steps to t =", state.t, "in {:.3f}s".format(trajectory.wallTime),
           "(applied current scaled norm {:.6g})".format(trajectory.appliedNorm))
  return trajectory
