import math

import numpy as np
import pytest

import IonicHandler
from IonicHandler import GapModel, IonicModel, InvalidModelError


def test_default_beta1_makes_tilde_monotone(model):
  assert model.beta1 == pytest.approx((1 + 0.25) ** 2 / 3)
  assert IonicModel(beta1="auto").beta1 == model.beta1


def test_fhn_roots():
  model = IonicModel()
  v = np.array([0.0, 0.25, 1.0])
  np.testing.assert_allclose(IonicHandler.ia(model, v), 0.0, atol=1e-15)
  # between theta and 1 the cubic drives v upwards, so the outward current is negative
  assert IonicHandler.ia(model, 0.5) < 0


def test_eval_ion_at_rest_is_zero(model):
  current, recovery, rate = IonicHandler.evalIon(model, np.zeros(3), np.zeros(3))
  assert not current.any() and not recovery.any() and not rate.any()
  assert IonicHandler.evalGap(GapModel(gGap=2.0), 0.5) == 1.0


@pytest.mark.parametrize("changes", [
  {"theta": 1.5}, {"theta": 0.0}, {"rho": 1.0}, {"a1": 0.0}, {"b1": -1.0}, {"r": 2.0}, {"r": math.inf},
  {"beta1": -0.1}, {"beta2": -1.0}, {"beta1": "often"},
])
def test_invalid_models_are_rejected(changes):
  with pytest.raises(InvalidModelError):
    IonicModel(**changes)


def test_gap_model_needs_positive_parameters():
  with pytest.raises(InvalidModelError):
    GapModel(gGap=0.0)
  with pytest.raises(InvalidModelError):
    GapModel(cRatio=-1.0)


def test_explicit_current_splits_off_beta1(model):
  v = np.linspace(-2, 2, 9)
  np.testing.assert_allclose(IonicHandler.explicitCurrent(model, v) + model.beta1 * v, IonicHandler.ia(model, v))
  assert not IonicHandler.explicitCurrent(model, v, "linear").any()
  assert not IonicHandler.recoveryCurrent(model, v, "passive").any()
  np.testing.assert_allclose(IonicHandler.recoveryCurrent(model, v, "linear"), -model.rho * v)


def test_exact_linear_gating_matches_closed_form(model):
  v, w, dt = np.array([0.3, -1.0]), np.array([0.1, 0.5]), 0.2
  decay = math.exp(-model.b1 * dt)
  expected = w * decay + model.a1 / model.b1 * v * (1 - decay)
  np.testing.assert_allclose(IonicHandler.advanceGating(model, v, w, dt, "exact_linear"), expected, rtol=1e-14)


def test_explicit_gating_converges_to_exact(model):
  v, w, horizon = 0.7, 0.2, 0.5
  exact = IonicHandler.advanceGating(model, v, w, horizon, "exact_linear")
  errors = []
  for steps in (10, 20, 40):
    value = w
    for _ in range(steps):
      value = IonicHandler.advanceGating(model, v, value, horizon / steps)
    errors.append(abs(value - exact))
  assert errors[0] > errors[1] > errors[2]
  assert errors[1] / errors[2] == pytest.approx(2.0, rel=0.1)


def test_passive_gating_is_frozen(model):
  w = np.array([0.5, -0.5])
  out = IonicHandler.advanceGating(model, np.ones(2), w, 0.1, mode="passive")
  np.testing.assert_array_equal(out, w)
  assert out is not w


def test_unknown_gating_scheme(model):
  with pytest.raises(InvalidModelError):
    IonicHandler.advanceGating(model, 0.0, 0.0, 0.1, "implicit")


def test_default_model_certifies(model):
  report = IonicHandler.certifyAssumptions(model, (-10.0, 10.0), (-10.0, 10.0), 201)
  assert report.passed, report.toTable()
  for label in ("i", "ii", "iii", "iv"):
    assert report.check(label)
  assert report.record("recovery_coupling").constant == pytest.approx(model.alpha5)
  assert report.record("recovery_coupling").constant >= 0
  assert math.isfinite(report.record("tilde_Ia_coercive").constant)


def test_unregularized_model_fails_monotonicity():
  report = IonicHandler.certifyAssumptions(IonicModel(beta1=0.0))
  assert not report.check("iv")
  assert report.check("i") and report.check("ii") and report.check("iii")
  assert not report.record("monotone_tilde_Ia").passed


def test_wrong_exponent_fails_growth():
  report = IonicHandler.certifyAssumptions(IonicModel(r=5.0))
  assert not report.check("i")
  assert not report.record("growth_Ia_lower").passed


def test_report_table_and_rows(model):
  report = IonicHandler.certifyAssumptions(model, samples=51)
  rows = report.rows()
  assert [row["assumption"] for row in rows] == [r.name for r in report.records]
  assert set(rows[0]) == {"assumption", "worst_margin", "constant", "pass"}
  assert "recovery_coupling" in report.toTable()
  with pytest.raises(KeyError):
    report.record("missing")


def test_certification_rejects_empty_ranges(model):
  with pytest.raises(ValueError):
    IonicHandler.certifyAssumptions(model, vRange=(1.0, -1.0))
