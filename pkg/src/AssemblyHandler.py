import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

import Settings
from MeshHandler import I1, I2, E, INTERFACES, MicroMesh
from log import log

settings = Settings.conductivity
settings.updateDefaults({
  "tensorI": [[1.0, 0.0], [0.0, 1.0]],
  "tensorE": [[1.0, 0.0], [0.0, 1.0]],
  "tensorI1": [], # Empty means tensorI
  "tensorI2": [],
  "modulation": 0.0, # Y-periodic scaling 1 + modulation * sin^2(pi y1 / l1)
  "alpha": 1e-2,
  "beta": 1e2,
})

# Matrices up to this size are checked with dense factorizations
DENSE_LIMIT = 2000
PIVOT_TOLERANCE = 1e-12
RITZ_TOLERANCE = 1e-10


class InvalidConductivityError(ValueError):
  pass


class ContractViolation(ValueError):
  pass


def _tensor(value, name):
  tensor = np.array(value, dtype=float)
  if tensor.shape != (2, 2):
    raise InvalidConductivityError("{} must be a 2x2 matrix, got shape {}".format(name, tensor.shape))
  if not np.array_equal(tensor, tensor.T):
    raise InvalidConductivityError("{} is not symmetric: {}".format(name, tensor.tolist()))
  return tensor


@dataclass(frozen=True, eq=False)
class ConductivitySpec:
  tensorI1: np.ndarray = field(default_factory=lambda: np.eye(2))
  tensorI2: np.ndarray = field(default_factory=lambda: np.eye(2))
  tensorE: np.ndarray = field(default_factory=lambda: np.eye(2))
  modulation: float = 0.0
  alpha: float = 1e-2
  beta: float = 1e2

  def __post_init__(self):
    for name in ("tensorI1", "tensorI2", "tensorE"):
      object.__setattr__(self, name, _tensor(getattr(self, name), name))
    self.validate()

  @classmethod
  def fromSettings(cls, section):
    shared = section["tensorI"]
    return cls(tensorI1=section["tensorI1"] or shared, tensorI2=section["tensorI2"] or shared,
               tensorE=section["tensorE"], modulation=float(section["modulation"]),
               alpha=float(section["alpha"]), beta=float(section["beta"]))

  def byTag(self, tag):
    return (self.tensorI1, self.tensorI2, self.tensorE)[tag]

  def validate(self):
    if not 0 < self.alpha < self.beta:
      raise InvalidConductivityError("ellipticity bounds need 0 < alpha < beta, got {} and {}".format(
        self.alpha, self.beta))
    if not self.modulation >= 0:
      raise InvalidConductivityError("modulation must be nonnegative, got {}".format(self.modulation))
    for tag, name in enumerate(("tensorI1", "tensorI2", "tensorE")):
      low, high = np.linalg.eigvalsh(self.byTag(tag))
      if low <= 0:
        raise InvalidConductivityError("{} is not positive definite (eigenvalues {}, {})".format(name, low, high))
      if low < self.alpha or high * (1 + self.modulation) > self.beta:
        raise InvalidConductivityError("{} eigenvalues [{}, {}] leave the declared bounds [{}, {}]".format(
          name, low, high * (1 + self.modulation), self.alpha, self.beta))

  def elementTensors(self, mesh: MicroMesh):
    """ Tensor of every triangle, sampled at its centroid """
    base = np.stack([self.tensorI1, self.tensorI2, self.tensorE])[mesh.tags]
    if self.modulation:
      y1 = mesh.referenceCoordinates(mesh.centroids)[:, 0]
      base = base * (1 + self.modulation * np.sin(math.pi * y1 / mesh.spec.cellLengths[0]) ** 2)[:, None, None]
    return base


@dataclass(frozen=True, eq=False)
class DofLayout:
  """
  Contiguous blocks (u1, u2, ue, w1, w2) of the full unknown vector.
  Potentials follow the mesh vertex numbering; gating values live on the membrane trace nodes
  """
  blocks: tuple
  traces: dict # interface -> (inner selection, outer selection)
  differences: dict # interface -> inner minus outer

  @property
  def u1(self):
    return slice(self.blocks[0], self.blocks[1])

  @property
  def u2(self):
    return slice(self.blocks[1], self.blocks[2])

  @property
  def ue(self):
    return slice(self.blocks[2], self.blocks[3])

  @property
  def potentials(self):
    return slice(0, self.blocks[3])

  @property
  def w1(self):
    return slice(self.blocks[3], self.blocks[4])

  @property
  def w2(self):
    return slice(self.blocks[4], self.blocks[5])

  @property
  def size(self):
    return self.blocks[5]


@dataclass(frozen=True, eq=False)
class BlockOperator:
  mesh: MicroMesh
  conductivity: ConductivitySpec
  layout: DofLayout
  stiffness: sp.csr_matrix
  laplacian: sp.csr_matrix # identity tensor, for H1 norms
  volumeMass: sp.csr_matrix
  traceMass: dict # interface -> mass on its trace nodes (B1, B2, B12)
  differenceMass: dict # interface -> D^T B D in vertex numbering
  sideMass: sp.csr_matrix # trace mass of both sides of all interfaces in vertex numbering
  constraint: np.ndarray # integral of u_e

  def block(self, matrix, tag):
    s = self.mesh.block(tag)
    return matrix[s, s]

  @property
  def K1(self):
    return self.block(self.stiffness, I1)

  @property
  def K2(self):
    return self.block(self.stiffness, I2)

  @property
  def Ke(self):
    return self.block(self.stiffness, E)

  @property
  def Mvole(self):
    return self.block(self.volumeMass, E)

  def trace(self, name, U):
    """ Jump of a potential vector across one interface, on its trace nodes """
    return self.layout.differences[name] @ U


def _symmetric(matrix):
  matrix = matrix.tocsr()
  return ((matrix + matrix.T) * 0.5).tocsr()


def _scatter(cells, local, n):
  """ Sums element matrices into a sparse n x n matrix """
  k = cells.shape[1]
  rows = np.repeat(cells, k, axis=1).ravel()
  cols = np.tile(cells, (1, k)).ravel()
  return _symmetric(sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)))


def _gradients(mesh):
  p = mesh.vertices[mesh.triangles]
  x, y = p[..., 0], p[..., 1]
  b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
  c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
  return np.stack([b, c], axis=-1) / (2 * mesh.areas)[:, None, None]


def stiffnessMatrix(mesh, tensors):
  grads = _gradients(mesh)
  local = np.einsum("tia,tab,tjb->tij", grads, tensors, grads) * mesh.areas[:, None, None]
  return _scatter(mesh.triangles, local, mesh.nVertices)


def massMatrix(mesh):
  local = (np.full((3, 3), 1.0) + np.eye(3)) / 12
  return _scatter(mesh.triangles, mesh.areas[:, None, None] * local, mesh.nVertices)


def _lineMass(lengths):
  return lengths[:, None, None] * (np.full((2, 2), 1.0) + np.eye(2)) / 6


def _selection(nodes, n):
  return sp.csr_matrix((np.ones(len(nodes)), (np.arange(len(nodes)), nodes)), shape=(len(nodes), n))


def assemble(mesh: MicroMesh, cond: ConductivitySpec) -> BlockOperator:
  """
  P1 assembly of every block. Stiffness uses the element tensor at the centroid,
  interface masses are 1D linear elements on the facet chains
  """
  cond.validate()
  tensors = cond.elementTensors(mesh)
  eigen = np.linalg.eigvalsh(tensors)
  if eigen.min() < cond.alpha or eigen.max() > cond.beta:
    raise InvalidConductivityError("element tensors have eigenvalues in [{}, {}], outside [{}, {}]".format(
      eigen.min(), eigen.max(), cond.alpha, cond.beta))

  n = mesh.nVertices
  traceMass, differenceMass, traces, differences, sides = {}, {}, {}, {}, []
  for name in INTERFACES:
    facets = mesh.facets[name]
    local = _lineMass(facets.lengths)
    traceMass[name] = _scatter(facets.local, local, facets.size)
    jump = np.block([[local, -local], [-local, local]])
    differenceMass[name] = _scatter(np.concatenate([facets.inner, facets.outer], axis=1), jump, n)
    sides += [_scatter(facets.inner, local, n), _scatter(facets.outer, local, n)]
    inner, outer = _selection(facets.innerNodes, n), _selection(facets.outerNodes, n)
    traces[name] = (inner, outer)
    differences[name] = (inner - outer).tocsr()

  volumeMass = massMatrix(mesh)
  constraint = np.asarray(volumeMass.sum(axis=1)).ravel() * (mesh.vertexTags == E)
  blocks = tuple(mesh.blocks) + (n + mesh.gamma1.size, n + mesh.gamma1.size + mesh.gamma2.size)

  op = BlockOperator(
    mesh=mesh, conductivity=cond,
    layout=DofLayout(blocks=blocks, traces=traces, differences=differences),
    stiffness=stiffnessMatrix(mesh, tensors),
    laplacian=stiffnessMatrix(mesh, np.broadcast_to(np.eye(2), tensors.shape)),
    volumeMass=volumeMass, traceMass=traceMass, differenceMass=differenceMass,
    sideMass=sum(sides[1:], sides[0]).tocsr(), constraint=constraint,
  )
  log.info("Assembled", n, "potential and", mesh.gamma1.size + mesh.gamma2.size, "gating unknowns")
  return op


@dataclass(frozen=True, eq=False)
class SystemMatrix:
  """ Implicit-step matrix on the potentials plus the mean-zero constraint that borders it """
  matrix: sp.csr_matrix
  constraint: np.ndarray
  parts: dict
  coefficients: dict

  def bordered(self):
    c = sp.csr_matrix(self.constraint[None, :])
    return sp.bmat([[self.matrix, c.T], [c, None]], format="csc")

  def project(self, U):
    """ Orthogonal projection onto the constraint's null space """
    c = self.constraint
    return U - c * (c @ U) / (c @ c)


def buildSystemMatrix(op: BlockOperator, eps, delta, dt, beta1, gGap, cRatio) -> SystemMatrix:
  if not (eps > 0 and dt > 0 and delta >= 0):
    raise ValueError("need eps > 0, dt > 0 and delta >= 0, got {}, {}, {}".format(eps, dt, delta))
  membrane = op.differenceMass["gamma1"] + op.differenceMass["gamma2"]
  gapMass = op.differenceMass["gamma12"]
  coefficients = {
    "capacitive": eps / dt,
    "ionic": beta1 * eps,
    "gapCapacitive": cRatio * eps / dt,
    "gapResistive": eps * gGap * cRatio,
    "regularization": delta / dt,
  }
  parts = {
    "capacitive": coefficients["capacitive"] * membrane,
    "ionic": coefficients["ionic"] * membrane,
    "gapCapacitive": coefficients["gapCapacitive"] * gapMass,
    "gapResistive": coefficients["gapResistive"] * gapMass,
    "stiffness": op.stiffness,
    "regularization": coefficients["regularization"] * (op.volumeMass + op.sideMass),
  }
  matrix = parts["stiffness"]
  for name in ("capacitive", "ionic", "gapCapacitive", "gapResistive", "regularization"):
    matrix = matrix + parts[name]
  return SystemMatrix(matrix=matrix.tocsr(), constraint=op.constraint, parts=parts, coefficients=coefficients)


def interfaceMatrix(op: BlockOperator, cRatio=0.5):
  """ Interface part of the regularized operator: membrane jumps plus cRatio times the gap jump """
  return (op.differenceMass["gamma1"] + op.differenceMass["gamma2"] + cRatio * op.differenceMass["gamma12"]).tocsr()


def regularizationMatrix(op: BlockOperator, delta):
  """ delta times all volume and trace masses on the potentials, and the membrane masses on the gating blocks """
  return sp.block_diag([delta * (op.volumeMass + op.sideMass), op.traceMass["gamma1"], op.traceMass["gamma2"]],
                       format="csr")


def lemmaMatrix(op: BlockOperator, eps, delta, cRatio=0.5):
  """ Full regularized operator over potentials and gating values """
  gating = op.layout.size - op.mesh.nVertices
  interface = sp.block_diag([interfaceMatrix(op, cRatio), sp.csr_matrix((gating, gating))], format="csr")
  return (regularizationMatrix(op, delta) + eps * interface).tocsr()


def interfaceQuadraticTerms(mesh: MicroMesh, d, cRatio=0.5):
  """
  Facet-by-facet integrals of the squared jumps of a potential vector d
  :return: (int over gamma1, int over gamma2, cRatio * int over gamma12)
  """
  terms = []
  for name in INTERFACES:
    facets = mesh.facets[name]
    jump = d[facets.inner] - d[facets.outer]
    a, b = jump[:, 0], jump[:, 1]
    terms.append(math.fsum(facets.lengths * (a * a + a * b + b * b) / 3))
  terms[2] *= cRatio
  return tuple(terms)


@dataclass
class SpdReport:
  mode: str
  passed: bool
  value: float # minimum pivot in strict mode, most negative Ritz value in semidefinite mode
  norm: float
  size: int
  method: str
  detail: str = ""

  def __str__(self):
    label = "strict PD" if self.mode == "strict" else "semidefinite"
    return "{}: {} ({} {} = {:.6e}, |A| = {:.6e}, n = {})".format(
      label, "pass" if self.passed else "fail", self.method, "min pivot" if self.mode == "strict" else "min Ritz",
      self.value, self.norm, self.size)


def checkSpd(matrix, mode="strict") -> SpdReport:
  """
  strict: symmetric factorization, reports the smallest pivot
  semidefinite: smallest eigenvalue from an eigensolve
  """
  matrix = sp.csr_matrix(matrix)
  n = matrix.shape[0]
  norm = float(spla.norm(matrix, np.inf)) if matrix.nnz else 0.0
  asymmetry = abs(matrix - matrix.T).max() if matrix.nnz else 0.0
  if matrix.shape[0] != matrix.shape[1] or asymmetry > 1e-14 * max(norm, 1.0):
    raise ContractViolation("check_spd needs a symmetric matrix, max |A - A^T| = {}".format(asymmetry))

  if mode == "strict":
    if n <= DENSE_LIMIT:
      try:
        pivots = np.diag(np.linalg.cholesky(matrix.toarray())) ** 2
      except np.linalg.LinAlgError:
        return SpdReport(mode, False, -math.inf, norm, n, "cholesky", "non-positive pivot during factorization")
      minimum = float(pivots.min())
      return SpdReport(mode, minimum > PIVOT_TOLERANCE * norm, minimum, norm, n, "cholesky")
    try:
      lu = spla.splu(matrix.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                     options={"SymmetricMode": True})
    except RuntimeError as e:
      return SpdReport(mode, False, -math.inf, norm, n, "splu", str(e))
    pivots = lu.U.diagonal()
    minimum = float(pivots.min())
    if not np.array_equal(lu.perm_r, lu.perm_c):
      # Row pivoting happened, so the pivots no longer certify definiteness
      low = float(spla.eigsh(matrix, k=1, which="SA", return_eigenvectors=False, tol=1e-10)[0])
      return SpdReport(mode, low > PIVOT_TOLERANCE * norm, low, norm, n, "eigsh", "unsymmetric pivoting")
    return SpdReport(mode, minimum > PIVOT_TOLERANCE * norm, minimum, norm, n, "splu")

  if mode == "semidefinite":
    if n <= DENSE_LIMIT:
      low, method = float(scipy.linalg.eigvalsh(matrix.toarray(), subset_by_index=[0, 0])[0]), "eigvalsh"
    else:
      low, method = float(spla.eigsh(matrix, k=1, which="SA", return_eigenvectors=False, tol=1e-10)[0]), "eigsh"
    return SpdReport(mode, low >= -RITZ_TOLERANCE * norm, low, norm, n, method)
  raise ValueError("Unknown mode '{}'".format(mode))
