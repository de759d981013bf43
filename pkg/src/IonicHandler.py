import math
from dataclasses import dataclass, field

import numpy as np

# Membrane currents, gating dynamics and the sampled check of the structural assumptions the solver relies on.
# Everything here is a pure function of immutable records

import Settings
from log import log

ionicSettings = Settings.ionic
gapSettings = Settings.gap

ionicSettings.updateDefaults({
  "a1": 1.0,
  "b1": 1.0,
  "rho": -1.0,
  "theta": 0.25,
  "r": 4.0,
  "beta1": "auto", # |rho|(1+theta)^2/3
  "beta2": 0.0,
})

gapSettings.updateDefaults({
  "gGap": 1.0,
  "cRatio": 0.5,
})

IONIC_MODES = ("fhn", "linear", "passive")
GATING_SCHEMES = ("explicit_euler", "exact_linear")


class InvalidModelError(ValueError):
  pass


@dataclass(frozen=True)
class IonicModel:
  """ FitzHugh-Nagumo membrane model: I_a(v) = rho v (1-v)(v-theta), I_b(w) = -rho w, H(v, w) = a1 v - b1 w """
  a1: float = 1.0
  b1: float = 1.0
  rho: float = -1.0
  theta: float = 0.25
  r: float = 4.0
  beta1: float = None
  beta2: float = 0.0

  def __post_init__(self):
    if self.beta1 is None or self.beta1 == "auto":
      object.__setattr__(self, "beta1", abs(self.rho) * (1 + self.theta) ** 2 / 3)
    else:
      try:
        object.__setattr__(self, "beta1", float(self.beta1))
      except (TypeError, ValueError):
        raise InvalidModelError("beta1 must be a number or 'auto', got {!r}".format(self.beta1)) from None
    if not (self.a1 > 0 and self.b1 > 0):
      raise InvalidModelError("a1 and b1 must be positive, got {} and {}".format(self.a1, self.b1))
    if not self.rho < 0:
      raise InvalidModelError("rho must be negative, got {}".format(self.rho))
    if not 0 < self.theta < 1:
      raise InvalidModelError("theta must lie in (0, 1), got {}".format(self.theta))
    if not (2 < self.r < math.inf):
      raise InvalidModelError("r must lie in (2, inf), got {}".format(self.r))
    # beta1 = 0 is accepted so that the certifier can be shown a non-monotone model
    if self.beta1 < 0 or self.beta2 < 0:
      raise InvalidModelError("beta1 and beta2 must be nonnegative, got {} and {}".format(self.beta1, self.beta2))

  @classmethod
  def fromSettings(cls, section):
    return cls(a1=float(section["a1"]), b1=float(section["b1"]), rho=float(section["rho"]),
               theta=float(section["theta"]), r=float(section["r"]), beta1=section["beta1"],
               beta2=float(section["beta2"]))

  @property
  def alpha1(self):
    """ Coefficient bound |I_a(v)| <= c0 + c3 |v|^3 obtained with Young's inequality on each monomial """
    c0 = (2 / 3 * self.theta + 1 / 3 * (1 + self.theta)) * abs(self.rho)
    c3 = (1 / 3 * self.theta + 2 / 3 * (1 + self.theta) + 1) * abs(self.rho)
    return max(c0, c3)

  @property
  def alpha2(self):
    return abs(self.rho)

  @property
  def alpha3(self):
    return max(self.a1, self.b1)

  @property
  def alpha4(self):
    return -self.rho / self.a1

  @property
  def alpha5(self):
    # I_b(w) v - alpha4 H w = -rho w v + (rho / a1)(a1 v - b1 w) w = -(rho b1 / a1) w^2
    return -self.rho * self.b1 / self.a1


@dataclass(frozen=True)
class GapModel:
  gGap: float = 1.0
  cRatio: float = 0.5

  def __post_init__(self):
    if not (self.gGap > 0 and self.cRatio > 0):
      raise InvalidModelError("gGap and cRatio must be positive, got {} and {}".format(self.gGap, self.cRatio))

  @classmethod
  def fromSettings(cls, section):
    return cls(gGap=float(section["gGap"]), cRatio=float(section["cRatio"]))


def ia(model, v):
  return model.rho * v * (1 - v) * (v - model.theta)


def ib(model, w):
  return -model.rho * w


def gating(model, v, w):
  return model.a1 * v - model.b1 * w


def evalIon(model: IonicModel, v, w):
  """ :return: (I_a(v), I_b(w), H(v, w)) """
  return ia(model, v), ib(model, w), gating(model, v, w)


def evalGap(model: GapModel, s):
  return model.gGap * s


def tildeIa(model, v):
  return ia(model, v) + model.beta1 * v + model.beta2


def explicitCurrent(model, v, mode="fhn"):
  """
  Part of I_a evaluated at the old potential. The remainder beta1 * v is taken at the new one,
  so I_a(v) is advanced as I_a(v^n) + beta1 (v^{n+1} - v^n)
  """
  if mode == "fhn":
    return ia(model, v) - model.beta1 * v
  return np.zeros_like(v)


def recoveryCurrent(model, w, mode="fhn"):
  if mode == "passive":
    return np.zeros_like(w)
  return ib(model, w)


def advanceGating(model, v, w, dt, scheme="explicit_euler", mode="fhn"):
  """
  One step of w' = a1 v - b1 w with v frozen at the old potential
  :param scheme: explicit_euler or exact_linear
  """
  if mode == "passive":
    return np.array(w, dtype=float, copy=True)
  if scheme == "explicit_euler":
    return w + dt * gating(model, v, w)
  if scheme == "exact_linear":
    decay = math.exp(-model.b1 * dt)
    return w * decay + model.a1 / model.b1 * v * (1 - decay)
  raise InvalidModelError("Unknown gating scheme '{}'".format(scheme))


@dataclass
class AssumptionRecord:
  name: str
  check: str
  domain: str
  worstMargin: float
  passed: bool
  constant: float = math.nan
  detail: str = ""


@dataclass
class AssumptionReport:
  records: list = field(default_factory=list)
  tolerance: float = 1e-12

  @property
  def passed(self):
    return all(record.passed for record in self.records)

  def check(self, label):
    """ True if every record belonging to check (i), (ii), (iii) or (iv) passed """
    return all(record.passed for record in self.records if record.check == label)

  def record(self, name):
    for record in self.records:
      if record.name == name:
        return record
    raise KeyError(name)

  def rows(self):
    return [{"assumption": r.name, "worst_margin": repr(float(r.worstMargin)), "constant": repr(float(r.constant)),
             "pass": "pass" if r.passed else "fail"} for r in self.records]

  def toTable(self):
    lines = ["{:<20} {:<5} {:<28} {:>14} {:>14}  {}".format("assumption", "check", "domain", "worst_margin",
                                                         "constant", "result")]
    for r in self.records:
      lines.append("{:<20} {:<5} {:<28} {:>14.6e} {:>14.6e}  {}{}".format(
        r.name, r.check, r.domain, r.worstMargin, r.constant, "pass" if r.passed else "FAIL",
        "  (" + r.detail + ")" if r.detail else ""))
    return "\n".join(lines)


def _margin(lhs, rhs):
  """ Relative margin of lhs >= rhs """
  return float(np.min((lhs - rhs) / (1 + np.abs(rhs))))


def certifyAssumptions(model: IonicModel, vRange=(-10.0, 10.0), wRange=(-10.0, 10.0), samples=201,
                       tolerance=1e-12) -> AssumptionReport:
  """
  Samples the structural inequalities on a grid over vRange x wRange
  :return: AssumptionReport with one record per inequality, each tagged with its check (i)-(iv)
  """
  if samples < 2 or not (vRange[0] < vRange[1] and wRange[0] < wRange[1]):
    raise ValueError("certification needs samples >= 2 and nonempty ranges")
  v = np.linspace(vRange[0], vRange[1], samples)
  w = np.linspace(wRange[0], wRange[1], samples)
  vDomain = "v in [{:g}, {:g}]".format(*vRange)
  wDomain = "w in [{:g}, {:g}]".format(*wRange)
  boxDomain = "[{:g}, {:g}] x [{:g}, {:g}]".format(*vRange, *wRange)
  report = AssumptionReport(tolerance=tolerance)
  add = lambda name, check, domain, margin, constant, detail="", extra=True: report.records.append(
    AssumptionRecord(name, check, domain, margin, bool(extra and margin >= -tolerance), constant, detail))

  a1, p = model.alpha1, model.r - 1
  absIa = np.abs(ia(model, v))
  add("growth_Ia_upper", "i", vDomain, _margin(a1 * (np.abs(v) ** p + 1), absIa), a1)
  add("growth_Ia_lower", "i", vDomain, _margin(absIa, np.abs(v) ** p / a1 - a1), a1)
  add("growth_Ib", "i", wDomain, _margin(model.alpha2 * (np.abs(w) + 1), np.abs(ib(model, w))), model.alpha2)

  V, W = np.meshgrid(v, w)
  add("growth_H", "ii", boxDomain,
      _margin(model.alpha3 * (np.abs(V) + np.abs(W) + 1), np.abs(gating(model, V, W))), model.alpha3)

  coupling = ib(model, W) * V - model.alpha4 * gating(model, V, W) * W
  nonzero = np.abs(W) > 1e-8 * max(abs(wRange[0]), abs(wRange[1]))
  coefficients = coupling[nonzero] / W[nonzero] ** 2
  fitted = float(np.min(coefficients)) if coefficients.size else math.nan
  spread = float(np.max(coefficients) - np.min(coefficients)) if coefficients.size else math.nan
  add("recovery_coupling", "iii", boxDomain, _margin(coupling, model.alpha5 * W ** 2), fitted,
      "alpha4={:.6g} alpha5={:.6g} spread={:.3g}".format(model.alpha4, model.alpha5, spread),
      extra=fitted > 0 and spread <= 1e-9 * (1 + abs(fitted)))

  tilde = tildeIa(model, v)
  steps = np.diff(tilde)
  add("monotone_tilde_Ia", "iv", vDomain, float(np.min(steps)), model.beta1, "beta1={:.6g}".format(model.beta1),
      extra=bool(np.all(steps > 0)))

  # Pairwise lower bound (tilde(v) - tilde(v'))(v - v') >= (1 + |v| + |v'|)^(r-2) |v - v'|^2 / C
  A, B = np.meshgrid(v, v)
  TA, TB = np.meshgrid(tilde, tilde)
  upper = np.triu_indices(samples, k=1)
  gain = ((TA - TB) * (A - B))[upper]
  weight = ((1 + np.abs(A) + np.abs(B)) ** (model.r - 2) * (A - B) ** 2)[upper]
  if np.all(gain > 0):
    fittedC = float(np.max(weight / gain))
    margin = _margin(gain, weight / fittedC)
  else:
    fittedC, margin = math.inf, float(np.min(gain))
  add("tilde_Ia_coercive", "iv", vDomain, margin, fittedC, extra=math.isfinite(fittedC))

  log.debug("Certification over", boxDomain, "with", samples, "samples per axis:",
            "pass" if report.passed else "fail")
  return report
