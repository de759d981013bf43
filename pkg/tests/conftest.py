import os, sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))

import AssemblyHandler
import IonicHandler
import MeshHandler
import StepHandler

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def buildOperator(density=4, counts=(1, 1), epsilon=1.0, conductivity=None):
  mesh = MeshHandler.buildMesh(MeshHandler.UnitCellSpec(meshDensity=density), MeshHandler.TilingSpec(counts, epsilon))
  return AssemblyHandler.assemble(mesh, conductivity or AssemblyHandler.ConductivitySpec())


def solverConfig(**changes):
  values = {"eps": 1.0, "delta": 0.0, "dt": 0.01, "tEnd": 0.1}
  values.update(changes)
  return StepHandler.SolverConfig(**values)


@pytest.fixture(scope="session")
def cellSpec():
  return MeshHandler.UnitCellSpec()


@pytest.fixture(scope="session")
def unitCell(cellSpec):
  return MeshHandler.buildUnitCell(cellSpec)


@pytest.fixture(scope="session")
def op():
  return buildOperator(4)


@pytest.fixture(scope="session")
def model():
  return IonicHandler.IonicModel()


@pytest.fixture(scope="session")
def gap():
  return IonicHandler.GapModel()


@pytest.fixture
def rng():
  return np.random.default_rng(1234)
