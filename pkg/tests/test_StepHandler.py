import math

import numpy as np
import pytest

import DiagnosticsHandler
import Settings
import StepHandler
from StepHandler import AppliedCurrent, InitialData, Profile, SolverFailure, DivergenceError, SystemState
from conftest import solverConfig

SMOOTH = InitialData(v1="0.5*cos(pi*x)", v2="0.3*sin(pi*y) - 0.1", s=0.2, w1="0.1*x", w2=0.05)


def zeroState(op):
  return SystemState(0.0, np.zeros(op.mesh.nVertices), np.zeros(op.mesh.gamma1.size), np.zeros(op.mesh.gamma2.size),
                     op.layout)


def stimulated(**changes):
  return solverConfig(iapp={"gamma1": AppliedCurrent("constant", amplitude=1.0)}, **changes)


def test_profile_numbers_and_expressions():
  points = np.array([[0.0, 0.0], [0.5, 1.0]])
  np.testing.assert_array_equal(Profile(2)(points), [2.0, 2.0])
  np.testing.assert_allclose(Profile("x + 2*y")(points), [0.0, 2.5])
  np.testing.assert_allclose(Profile("t*x")(points, 2.0), [0.0, 1.0])
  assert Profile("2*pi").constant == pytest.approx(2 * math.pi)
  assert Profile(0.0).isZero() and not Profile("x").isZero()


@pytest.mark.parametrize("value", ["x + z", "x +* y", [1, 2], True])
def test_profile_rejects_bad_input(value):
  with pytest.raises(Settings.ConfigError):
    Profile(value)


def test_pulse_is_active_on_half_open_window():
  pulse = AppliedCurrent("pulse", amplitude=2.0, start=0.1, duration=0.2)
  points = np.zeros((3, 2))
  assert not pulse(points, 0.05).any()
  np.testing.assert_array_equal(pulse(points, 0.1), [2.0] * 3)
  assert pulse(points, 0.29)[0] == 2.0
  assert not pulse(points, 0.3).any()


def test_applied_current_from_dict():
  current = AppliedCurrent.fromDict({"kind": "expression", "expression": "x*t"}, "gamma1")
  np.testing.assert_allclose(current(np.array([[2.0, 0.0]]), 0.5), [1.0])
  with pytest.raises(Settings.ConfigError):
    AppliedCurrent.fromDict({"kind": "constant", "amp": 1.0}, "gamma1")
  with pytest.raises(Settings.ConfigError):
    AppliedCurrent("ramp")


@pytest.mark.parametrize("changes", [
  {"dt": 0.0}, {"eps": -1.0}, {"delta": -1e-3}, {"linTol": 0.0}, {"gatingScheme": "rk4"},
  {"linSolver": "gmres"}, {"ionicMode": "hodgkin"},
])
def test_solver_config_validation(changes):
  with pytest.raises(Settings.ConfigError):
    solverConfig(**changes)


def test_solver_config_from_defaults():
  config = StepHandler.SolverConfig.fromSettings(Settings.solver.createInstance())
  assert config.dt == 0.01 and config.linSolver == "direct"
  assert config.iapp["gamma1"].kind == "zero"
  assert config.replace(dt=0.02).dt == 0.02


def test_initialize_matches_interface_data(op):
  initial = InitialData(v1=0.3, v2=-0.2, s=0.5, w1=0.1)
  state = StepHandler.initialize(op, solverConfig(), initial)
  np.testing.assert_allclose(state.v1, 0.3, atol=1e-9)
  np.testing.assert_allclose(state.v2, -0.2, atol=1e-9)
  np.testing.assert_allclose(state.s, 0.5, atol=1e-9)
  np.testing.assert_array_equal(state.w1, 0.1)
  assert abs(StepHandler.meanExtracellular(state, op)) < 1e-10
  assert state.t == 0.0


def test_state_is_read_only(op):
  state = zeroState(op)
  with pytest.raises(ValueError):
    state.U[0] = 1.0
  assert len(state.vector()) == op.layout.size


def test_project_mean_zero(op, rng):
  state = SystemState(0.0, rng.standard_normal(op.mesh.nVertices) + 3.0, np.zeros(op.mesh.gamma1.size),
                      np.zeros(op.mesh.gamma2.size), op.layout)
  projected = StepHandler.projectMeanZero(state, op)
  assert abs(StepHandler.meanExtracellular(projected, op)) < 1e-12
  np.testing.assert_allclose(projected.v1, state.v1, atol=1e-12)


def test_zero_data_stays_zero(op, model, gap):
  config = solverConfig(tEnd=1.0)
  trajectory = StepHandler.run(op, model, gap, config, zeroState(op))
  assert len(trajectory.states) == 101
  for state in trajectory.states:
    assert not state.U.any() and not state.w1.any() and not state.w2.any()
  assert trajectory.finalState.t == pytest.approx(1.0)


def test_gauge_shift_does_not_change_observables(op, model, gap):
  config = stimulated()
  state = StepHandler.initialize(op, config, SMOOTH)
  a = StepHandler.run(op, model, gap, config, state, nSteps=20).finalState
  b = StepHandler.run(op, model, gap, config, state.shifted(5.0), nSteps=20).finalState
  for name in ("v1", "v2", "s", "w1", "w2"):
    np.testing.assert_allclose(getattr(a, name), getattr(b, name), atol=1e-10)


def test_positive_applied_current_depolarizes(op, model, gap):
  up, _ = StepHandler.step(zeroState(op), op, model, gap, stimulated())
  down, _ = StepHandler.step(zeroState(op), op, model, gap,
                             solverConfig(iapp={"gamma1": AppliedCurrent("constant", amplitude=-1.0)}))
  ones = np.ones(op.mesh.gamma1.size)
  integral = lambda state: ones @ (op.traceMass["gamma1"] @ state.v1)
  assert integral(up) > 0 > integral(down)


def test_flux_balance_and_mean_zero_over_long_run(op, model, gap):
  config = stimulated(tEnd=2.0)
  trajectory = StepHandler.run(op, model, gap, config, StepHandler.initialize(op, config, SMOOTH))
  assert len(trajectory.reports) == 201
  for state, report in zip(trajectory.states[1:], trajectory.reports[1:]):
    assert report.converged
    assert report.fluxBalanced, str(report)
    assert set(report.fluxBalance) == {"intra1", "intra2", "extra"}
    assert abs(op.constraint @ state.U) <= 1e-10 * max(1.0, np.abs(state.U).max())


def test_run_records_initial_state_and_every_stride(op, model, gap):
  trajectory = StepHandler.run(op, model, gap, solverConfig(tEnd=0.03), zeroState(op))
  assert len(trajectory.states) == 4
  assert trajectory.reports[0] is None
  assert np.all(np.diff(trajectory.times) > 0)
  strided = StepHandler.run(op, model, gap, solverConfig(tEnd=0.05), zeroState(op), stride=2)
  assert strided.times == pytest.approx([0.0, 0.02, 0.04, 0.05])


def test_run_rejects_empty_horizon(op, model, gap):
  with pytest.raises(Settings.ConfigError):
    StepHandler.run(op, model, gap, solverConfig(tEnd=0.0), zeroState(op))


def test_restart_is_bitwise_deterministic(op, model, gap):
  config = stimulated()
  state = StepHandler.initialize(op, config, SMOOTH)
  straight = StepHandler.run(op, model, gap, config, state, nSteps=10).finalState
  half = StepHandler.run(op, model, gap, config, state, nSteps=5).finalState
  restarted = StepHandler.run(op, model, gap, config, half, nSteps=5).finalState
  np.testing.assert_array_equal(straight.U, restarted.U)
  np.testing.assert_array_equal(straight.w1, restarted.w1)
  assert straight.t == restarted.t


@pytest.mark.parametrize("mode, dt", [("passive", 0.01), ("linear", 0.01), ("linear", 0.1)])
def test_energy_never_increases_without_stimulus(op, model, gap, mode, dt):
  config = solverConfig(ionicMode=mode, dt=dt)
  trajectory = StepHandler.run(op, model, gap, config, StepHandler.initialize(op, config, SMOOTH), nSteps=50)
  energies = [DiagnosticsHandler.energy(s, op, model, config, gap).total for s in trajectory.states]
  assert energies[0] > 0
  for before, after in zip(energies, energies[1:]):
    assert after <= before + 1e-12 * energies[0]


@pytest.mark.parametrize("scheme", ["explicit_euler", "exact_linear"])
def test_projected_cg_matches_direct_solve(op, model, gap, scheme):
  direct = stimulated(gatingScheme=scheme)
  iterative = direct.replace(linSolver="cg")
  state = StepHandler.initialize(op, direct, SMOOTH)
  a = StepHandler.run(op, model, gap, direct, state, nSteps=5)
  b = StepHandler.run(op, model, gap, iterative, state, nSteps=5)
  scale = np.abs(a.finalState.U).max()
  np.testing.assert_allclose(b.finalState.U, a.finalState.U, atol=1e-7 * scale)
  assert all(report.iterations > 0 for report in b.reports[1:])


def test_stagnating_solver_reports_failure_time(op, model, gap):
  config = stimulated(linSolver="cg", linMaxit=1)
  state = StepHandler.initialize(op, config, SMOOTH)
  with pytest.raises(SolverFailure) as info:
    StepHandler.run(op, model, gap, config, state, nSteps=3)
  assert info.value.time == pytest.approx(config.dt)
  assert info.value.report is not None and not info.value.report.converged


def test_non_finite_state_raises_divergence(op, model, gap):
  base = zeroState(op)
  broken = SystemState(0.0, base.U, np.full(op.mesh.gamma1.size, np.inf), base.w2, op.layout)
  with pytest.raises(DivergenceError):
    StepHandler.step(broken, op, model, gap, solverConfig())


def test_probes_are_sampled_on_recorded_states(op, model, gap):
  probes = {"mean": lambda state: StepHandler.meanExtracellular(state, op)}
  trajectory = StepHandler.run(op, model, gap, stimulated(tEnd=0.04), zeroState(op), probes=probes, stride=2)
  assert len(trajectory.probes["mean"]) == len(trajectory.states) == 3
  assert trajectory.appliedNorm > 0
