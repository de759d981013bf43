import argparse, os, sys, time

import AssemblyHandler
import ConfigHandler
import DiagnosticsHandler
import ExperimentHandler
import FileHandler
import IonicHandler
import MeshHandler
import Settings
import StepHandler
import log as logSetup
from log import log

# Problems with the input. Everything else that stops a command is a failed experiment
CONFIG_ERRORS = (Settings.ConfigError, MeshHandler.InvalidSpecError, AssemblyHandler.InvalidConductivityError,
                 IonicHandler.InvalidModelError)


def runCommand(config, args, directory, runner):
  outputs = config.outputs()
  solver = config.solver()
  op = config.buildOperator()
  model, gap = config.model(), config.gap()
  state = StepHandler.initialize(op, solver, config.initial())
  trajectory = StepHandler.run(op, model, gap, solver, state, stride=outputs["stride"])
  energies = DiagnosticsHandler.trajectoryEnergies(trajectory)
  for record in energies:
    log.debug("t =", record.t, "E =", record.total, "dissipation =", record.dissipation)
  files = FileHandler.emitOutputs(trajectory, energies, directory, outputs["formats"])
  reports = [report for report in trajectory.reports if report is not None]
  scale = max(1.0, float(abs(op.constraint).sum()))
  criteria = {
    "finite": all(s.isFinite() for s in trajectory.states),
    "mean_zero": all(abs(op.constraint @ s.U) <= solver.linTol * scale * max(1.0, float(abs(s.U).max()))
                     for s in trajectory.states[1:]),
    "flux_balance": all(report.fluxBalanced for report in reports),
    "energy_nonnegative": all(record.nonnegative(1e-12 * max(1.0, record.total)) for record in energies),
  }
  verdict = {"experiment": "run", "passed": all(criteria.values()), "criteria": criteria, "steps": len(reports),
             "final_time": trajectory.finalState.t}
  return verdict, files


def certifyCommand(config, args, directory, runner):
  options = config.experimentSettings("certify")
  report = IonicHandler.certifyAssumptions(config.model(), tuple(options["vRange"]), tuple(options["wRange"]),
                                           int(options["samples"]), float(options["tolerance"]))
  log.info("Assumption certification\n" + report.toTable())
  files = [FileHandler.writeCsv(os.path.join(directory, "certification.csv"), report.rows())]
  criteria = {"check_" + label: report.check(label) for label in ("i", "ii", "iii", "iv")}
  coupling = report.record("recovery_coupling").constant
  criteria["coupling_nonnegative"] = coupling >= 0
  return {"experiment": "certify", "passed": all(criteria.values()), "criteria": criteria,
          "coupling_constant": coupling}, files


def spdCommand(config, args, directory, runner):
  options = config.experimentSettings("spd")
  delta = args.delta if args.delta is not None else float(options["delta"])
  if delta < 0:
    raise Settings.ConfigError("--delta must be nonnegative, got {}".format(delta))
  gap = config.gap()
  report = ExperimentHandler.spdExperiment(config.buildOperator, options["densities"], options["epsilons"], delta,
                                           runner, gap.cRatio, int(options["randomVectors"]), int(options["seed"]))
  log.info("Positive definiteness\n" + report.toText())
  files = [FileHandler.writeCsv(os.path.join(directory, "spd.csv"), report.rows()),
           FileHandler.writeText(os.path.join(directory, "spd.txt"), report.toText())]
  if "mtx" in config.outputs()["formats"]:
    op = config.buildOperator(options["densities"][0])
    matrix = AssemblyHandler.lemmaMatrix(op, options["epsilons"][0], delta, gap.cRatio)
    files.append(FileHandler.writeMatrixMarket(matrix, os.path.join(directory, "lemma.mtx")))
  return report.verdict(), files


def stabilityCommand(config, args, directory, runner):
  options = config.experimentSettings("stability")
  report = ExperimentHandler.stabilityExperiment(config.runSpec(), options["perturbations"], runner, options["profile"],
                                                 float(options["tolerance"]), int(options["horizonFactor"]),
                                                 float(options["gronwallTolerance"]))
  log.info("\n" + report.toText())
  files = [FileHandler.writeCsv(os.path.join(directory, "stability.csv"), report.rows),
           FileHandler.writeText(os.path.join(directory, "stability.txt"), report.toText())]
  return report.verdict(), files


def mmsCommand(config, args, directory, runner):
  options = config.experimentSettings("mms")
  conductivity = config.conductivity(modulation=0.0)
  if config.conductivity().modulation:
    log.warning("Manufactured solutions use piecewise constant tensors, ignoring the modulation")
  build = lambda density: config.buildOperator(density, modulation=0.0)
  solver, gap, model = config.solver(), config.gap(), config.model()
  common = dict(eps=solver.eps, dt=float(options["dt"]), beta1=model.beta1, gap=gap, runner=runner)

  smooth = ExperimentHandler.ManufacturedSolution.parse(options["u1"], options["u2"], options["ue"], conductivity)
  report = ExperimentHandler.mmsConvergence(build, smooth, options["densities"], slopeRange=tuple(options["slopeRange"]),
                                            **common)
  exactCases = {
    "exact_constant": ("2", "2", "2"),
    "exact_linear": ("x + 2*y + 1", "3*x - y", "x - y / 2"),
  }
  for name, fields in exactCases.items():
    exact = ExperimentHandler.ManufacturedSolution.parse(*fields, conductivity)
    check = ExperimentHandler.mmsConvergence(build, exact, options["densities"][:2], exactTolerance=float(options["exactTolerance"]), **common)
    report.criteria[name] = check.criteria["exact_reproduction"]
  log.info("\n" + report.toText())
  files = [FileHandler.writeCsv(os.path.join(directory, "mms.csv"), report.rows),
           FileHandler.writeText(os.path.join(directory, "mms.txt"), report.toText())]
  return report.verdict(), files


def deltaLimitCommand(config, args, directory, runner):
  options = config.experimentSettings("deltaLimit")
  report = ExperimentHandler.deltaLimitExperiment(config.runSpec(), options["deltas"], runner)
  log.info("\n" + report.toText())
  files = [FileHandler.writeCsv(os.path.join(directory, "delta_limit.csv"), report.rows),
           FileHandler.writeText(os.path.join(directory, "delta_limit.txt"), report.toText())]
  return report.verdict(), files


def aprioriCommand(config, args, directory, runner):
  options = config.experimentSettings("apriori")
  densities = [int(d) for d in options["densities"]]
  specs = [config.runSpec(density) for density in densities]
  comparison = ExperimentHandler.aprioriComparison(specs, densities, runner, float(options["tolerance"]),
                                                  int(options["poincareSamples"]))
  log.info("\n" + comparison.toText())
  files = [FileHandler.writeCsv(os.path.join(directory, "apriori.csv"), comparison.rows()),
           FileHandler.writeText(os.path.join(directory, "apriori.txt"), comparison.toText())]
  return comparison.verdict(), files


def nondimCommand(config, args, directory, runner):
  report = DiagnosticsHandler.nondimensionalize(config.units())
  log.info("Nondimensionalization\n" + report.toText())
  files = [FileHandler.writeCsv(os.path.join(directory, "scales.csv"), report.rows()),
           FileHandler.writeText(os.path.join(directory, "scales.txt"), report.toText())]
  criteria = {"identity": report.identityError <= 1e-12,
              "cross_check": abs(report.epsilon - report.crossCheck) <= 1e-12 * report.crossCheck}
  return {"experiment": "nondim", "passed": all(criteria.values()), "criteria": criteria,
          "epsilon": report.epsilon, "published_epsilon": report.publishedEpsilon,
          "discrepancy_flagged": report.flagged}, files


COMMANDS = {
  "run": runCommand,
  "certify": certifyCommand,
  "spd": spdCommand,
  "stability": stabilityCommand,
  "mms": mmsCommand,
  "delta-limit": deltaLimitCommand,
  "apriori": aprioriCommand,
  "nondim": nondimCommand,
}


def buildParser():
  common = argparse.ArgumentParser(add_help=False)
  common.add_argument("--config", help="TOML run configuration")
  common.add_argument("--jobs", type=int, default=1, help="worker threads for independent runs")
  common.add_argument("--output", help="output directory, overrides outputs.directory")
  parser = argparse.ArgumentParser(prog="tridomain-sim", description="Tridomain interface simulator and verification harness")
  commands = parser.add_subparsers(dest="command", required=True)
  for name in COMMANDS:
    sub = commands.add_parser(name, parents=[common])
    if name == "spd":
      sub.add_argument("--delta", type=float, default=None, help="regularization of the checked operator")
  return parser


def main(argv=None):
  args = buildParser().parse_args(argv)
  started = time.perf_counter()
  try:
    config = ConfigHandler.loadConfig(args.config) if args.config else ConfigHandler.RunConfig()
    config.checkExperiment(args.command)
    directory = args.output or config.outputs()["directory"]
    logSetup.attachFile(directory)
    with ExperimentHandler.ExperimentRunner(args.jobs) as runner:
      verdict, files = COMMANDS[args.command](config, args, directory, runner)
    files.append(FileHandler.writeVerdict(directory, verdict))
    FileHandler.writeManifest(directory, config.raw, args.command, time.perf_counter() - started, files)
  except CONFIG_ERRORS as e:
    log.error("Configuration error:", e)
    return 2
  except StepHandler.SolverFailure as e:
    log.error("Solver failure at t =", e.time, "residual", e.residual, ":", e)
    if e.report is not None:
      log.error("Last step report:", e.report)
    return 1
  except OSError as e:
    log.error(e)
    return 1
  finally:
    logSetup.detachFile()
  log.info("Experiment", args.command, "passed" if verdict["passed"] else "FAILED")
  return 0 if verdict["passed"] else 1


if __name__ == "__main__":
  sys.exit(main())
