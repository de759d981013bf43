import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

# This module only builds and inspects geometry. Meshes are immutable once built and can be shared between threads

import Settings
from log import log

I1, I2, E = 0, 1, 2
TAG_NAMES = ("I1", "I2", "E")
INTERFACES = ("gamma1", "gamma2", "gamma12")

settings = Settings.geometry
settings.updateDefaults({
  "cellLengths": [1.0, 1.0],
  "innerMargin": 0.25,
  "splitFraction": 0.5,
  "meshDensity": 4,
  "counts": [1, 1],
  "epsilon": 1.0,
})


class InvalidSpecError(ValueError):
  pass


@dataclass(frozen=True)
class UnitCellSpec:
  cellLengths: tuple = (1.0, 1.0)
  innerMargin: float = 0.25
  splitFraction: float = 0.5
  meshDensity: int = 4

  def __post_init__(self):
    try:
      object.__setattr__(self, "cellLengths", tuple(float(i) for i in self.cellLengths))
    except (TypeError, ValueError):
      raise InvalidSpecError("cellLengths must be two numbers, got {!r}".format(self.cellLengths)) from None
    self.validate()

  def validate(self):
    if len(self.cellLengths) != 2 or not all(math.isfinite(i) and i > 0 for i in self.cellLengths):
      raise InvalidSpecError("cellLengths must be two positive lengths, got {}".format(self.cellLengths))
    if not 0 < self.innerMargin < 0.5:
      raise InvalidSpecError("innerMargin must lie in (0, 0.5), got {}".format(self.innerMargin))
    if not 0 < self.splitFraction < 1:
      raise InvalidSpecError("splitFraction must lie in (0, 1), got {}".format(self.splitFraction))
    if isinstance(self.meshDensity, bool) or int(self.meshDensity) != self.meshDensity or self.meshDensity < 1:
      raise InvalidSpecError("meshDensity must be a positive integer, got {}".format(self.meshDensity))

  @classmethod
  def fromSettings(cls, section):
    return cls(cellLengths=tuple(section["cellLengths"]), innerMargin=section["innerMargin"],
               splitFraction=section["splitFraction"], meshDensity=section["meshDensity"])

  def breakpoints(self):
    """ Grid lines every subdivision must hit: cell edges, inner box edges and the split plane """
    l1, l2 = self.cellLengths
    m = self.innerMargin
    left, right = m * l1, (1 - m) * l1
    split = left + self.splitFraction * (right - left)
    return np.array([0.0, left, split, right, l1]), np.array([0.0, m * l2, (1 - m) * l2, l2])

  def classify(self, x, y):
    """ Subdomain tag of points given in reference cell coordinates """
    l1, l2 = self.cellLengths
    m = self.innerMargin
    xb, _ = self.breakpoints()
    inside = (x > m * l1) & (x < (1 - m) * l1) & (y > m * l2) & (y < (1 - m) * l2)
    return np.where(inside, np.where(x < xb[2], I1, I2), E)


@dataclass(frozen=True)
class TilingSpec:
  counts: tuple = (1, 1)
  epsilon: float = 1.0

  def __post_init__(self):
    object.__setattr__(self, "counts", tuple(self.counts))
    if len(self.counts) != 2 or not all(int(i) == i and i >= 1 for i in self.counts):
      raise InvalidSpecError("counts must be two integers >= 1, got {}".format(self.counts))
    object.__setattr__(self, "counts", tuple(int(i) for i in self.counts))
    if not (math.isfinite(self.epsilon) and self.epsilon > 0):
      raise InvalidSpecError("epsilon must be positive, got {}".format(self.epsilon))

  @classmethod
  def fromSettings(cls, section):
    return cls(counts=tuple(section["counts"]), epsilon=float(section["epsilon"]))


@dataclass(frozen=True, eq=False)
class FacetSet:
  """
  Interface edges between two subdomains
  inner: (n, 2) node ids on the intracellular side (the I1 side for the gap junction)
  outer: (n, 2) node ids of the coincident nodes on the other side
  normals: unit normals pointing out of the inner side
  """
  inner: np.ndarray
  outer: np.ndarray
  normals: np.ndarray
  lengths: np.ndarray

  def __len__(self):
    return len(self.lengths)

  @cached_property
  def _traces(self):
    nodes, inverse = np.unique(self.inner.ravel(), return_inverse=True)
    partners = np.empty(len(nodes), dtype=np.int64)
    partners[inverse] = self.outer.ravel()
    return nodes, partners, inverse.reshape(-1, 2)

  @property
  def innerNodes(self):
    """ Inner-side node of every trace degree of freedom, sorted """
    return self._traces[0]

  @property
  def outerNodes(self):
    return self._traces[1]

  @property
  def local(self):
    """ Facet endpoints as indices into innerNodes """
    return self._traces[2]

  @property
  def size(self):
    return len(self.innerNodes)

  @property
  def measure(self):
    return float(np.sum(self.lengths))


@dataclass(frozen=True, eq=False)
class BoundaryFacets:
  nodes: np.ndarray
  tags: np.ndarray
  normals: np.ndarray
  lengths: np.ndarray


@dataclass(frozen=True, eq=False)
class MicroMesh:
  """
  Triangulation of the tiled cell geometry. Nodes on interfaces are duplicated per adjacent subdomain,
  and vertices are numbered by subdomain: all I1 vertices, then I2, then E
  """
  spec: UnitCellSpec
  tiling: TilingSpec
  vertices: np.ndarray
  triangles: np.ndarray
  tags: np.ndarray
  cellIds: np.ndarray
  blocks: tuple
  gamma1: FacetSet
  gamma2: FacetSet
  gamma12: FacetSet
  exterior: BoundaryFacets

  @property
  def nVertices(self):
    return len(self.vertices)

  @property
  def nTriangles(self):
    return len(self.triangles)

  def block(self, tag):
    """ Slice of the vertex numbering belonging to one subdomain """
    return slice(self.blocks[tag], self.blocks[tag + 1])

  @cached_property
  def vertexTags(self):
    return np.repeat(np.arange(3), np.diff(self.blocks))

  @cached_property
  def areas(self):
    p = self.vertices[self.triangles]
    return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                  - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

  @cached_property
  def centroids(self):
    return self.vertices[self.triangles].mean(axis=1)

  @property
  def facets(self):
    return {"gamma1": self.gamma1, "gamma2": self.gamma2, "gamma12": self.gamma12}

  @property
  def domainSize(self):
    return tuple(n * l * self.tiling.epsilon for n, l in zip(self.tiling.counts, self.spec.cellLengths))

  def referenceCoordinates(self, points):
    """ Maps physical points back into the reference cell Y """
    lengths = np.asarray(self.spec.cellLengths)
    scaled = np.asarray(points) / self.tiling.epsilon
    return scaled - np.floor(scaled / lengths) * lengths


def _gridLines(breaks, density):
  pieces = [breaks[:1]]
  for a, b in zip(breaks[:-1], breaks[1:]):
    n = max(1, int(round(density * (b - a))))
    pieces.append(np.linspace(a, b, n + 1)[1:])
  return np.concatenate(pieces)


def _tiledLines(cellLines, count, length, epsilon):
  lines = [cellLines[:-1] + i * length for i in range(count)] + [cellLines[-1:] + (count - 1) * length]
  return np.concatenate(lines) * epsilon


def _facetSet(tagA, tagB, g0, g1, direction, idMap, points, inner, outer):
  forward = (tagA == inner) & (tagB == outer)
  backward = (tagA == outer) & (tagB == inner)
  pick = forward | backward
  sign = np.where(forward[pick], 1.0, -1.0)
  n0, n1 = g0[pick], g1[pick]
  lengths = np.hypot(*(points[n1] - points[n0]).T)
  return FacetSet(
    inner=np.stack([idMap[inner, n0], idMap[inner, n1]], axis=1),
    outer=np.stack([idMap[outer, n0], idMap[outer, n1]], axis=1),
    normals=direction[pick] * sign[:, None],
    lengths=lengths,
  )


def _triangulate(spec: UnitCellSpec, tiling: TilingSpec) -> MicroMesh:
  (l1, l2), (nx, ny), eps = spec.cellLengths, tiling.counts, tiling.epsilon
  xb, yb = spec.breakpoints()
  cellX, cellY = _gridLines(xb, spec.meshDensity), _gridLines(yb, spec.meshDensity)
  X, Y = _tiledLines(cellX, nx, l1, eps), _tiledLines(cellY, ny, l2, eps)
  ncx, ncy = len(cellX) - 1, len(cellY) - 1
  nX, nY = nx * ncx, ny * ncy

  # Quad tags come from the reference cell so every copy is tagged identically
  localTags = spec.classify(*np.meshgrid(0.5 * (cellX[:-1] + cellX[1:]), 0.5 * (cellY[:-1] + cellY[1:])))
  quadTags = np.tile(localTags, (ny, nx))
  quadCells = np.stack(np.meshgrid(np.repeat(np.arange(nx), ncx), np.repeat(np.arange(ny), ncy)), axis=-1)

  gx, gy = np.meshgrid(X, Y)
  points = np.stack([gx.ravel(), gy.ravel()], axis=1)
  gid = lambda i, j: j * (nX + 1) + i

  jj, ii = np.meshgrid(np.arange(nY), np.arange(nX), indexing="ij")
  corners = np.stack([gid(ii, jj), gid(ii + 1, jj), gid(ii + 1, jj + 1), gid(ii, jj + 1)], axis=-1).reshape(-1, 4)
  flatTags = quadTags.ravel()

  idMap = np.full((3, len(points)), -1, dtype=np.int64)
  blocks, chunks = [0], []
  for tag in (I1, I2, E):
    used = np.unique(corners[flatTags == tag])
    idMap[tag, used] = np.arange(blocks[-1], blocks[-1] + len(used))
    blocks.append(blocks[-1] + len(used))
    chunks.append(points[used])
  vertices = np.concatenate(chunks)

  lower = idMap[flatTags[:, None], corners[:, [0, 1, 2]]]
  upper = idMap[flatTags[:, None], corners[:, [0, 2, 3]]]
  triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)
  tags = np.repeat(flatTags, 2)
  cellIds = np.repeat(quadCells.reshape(-1, 2), 2, axis=0)

  # Interior grid edges, each seen from the quad on its left/below (A) and right/above (B)
  vj, vi = np.meshgrid(np.arange(nY), np.arange(1, nX), indexing="ij")
  hj, hi = np.meshgrid(np.arange(1, nY), np.arange(nX), indexing="ij")
  vj, vi, hj, hi = vj.ravel(), vi.ravel(), hj.ravel(), hi.ravel()
  tagA = np.concatenate([quadTags[vj, vi - 1], quadTags[hj - 1, hi]])
  tagB = np.concatenate([quadTags[vj, vi], quadTags[hj, hi]])
  g0 = np.concatenate([gid(vi, vj), gid(hi, hj)])
  g1 = np.concatenate([gid(vi, vj + 1), gid(hi + 1, hj)])
  direction = np.concatenate([np.tile([1.0, 0.0], (len(vi), 1)), np.tile([0.0, 1.0], (len(hi), 1))])
  args = (tagA, tagB, g0, g1, direction, idMap, points)

  # Outer boundary: bottom, top, left, right
  bi, bj = np.arange(nX), np.arange(nY)
  bNodes = np.concatenate([
    np.stack([gid(bi, 0), gid(bi + 1, 0)], axis=1), np.stack([gid(bi, nY), gid(bi + 1, nY)], axis=1),
    np.stack([gid(0, bj), gid(0, bj + 1)], axis=1), np.stack([gid(nX, bj), gid(nX, bj + 1)], axis=1)])
  bTags = np.concatenate([quadTags[0, bi], quadTags[nY - 1, bi], quadTags[bj, 0], quadTags[bj, nX - 1]])
  bNormals = np.concatenate([np.tile(n, (c, 1)) for n, c in
                             (([0.0, -1.0], nX), ([0.0, 1.0], nX), ([-1.0, 0.0], nY), ([1.0, 0.0], nY))])

  return MicroMesh(
    spec=spec, tiling=tiling, vertices=vertices, triangles=triangles, tags=tags, cellIds=cellIds, blocks=tuple(blocks),
    gamma1=_facetSet(*args, inner=I1, outer=E),
    gamma2=_facetSet(*args, inner=I2, outer=E),
    gamma12=_facetSet(*args, inner=I1, outer=I2),
    exterior=BoundaryFacets(
      nodes=idMap[bTags[:, None], bNodes], tags=bTags, normals=bNormals,
      lengths=np.hypot(*(points[bNodes[:, 1]] - points[bNodes[:, 0]]).T)),
  )


def buildUnitCell(spec: UnitCellSpec) -> MicroMesh:
  spec.validate()
  mesh = _triangulate(spec, TilingSpec())
  log.debug("Built unit cell with", mesh.nTriangles, "triangles and", mesh.nVertices, "vertices")
  return mesh


def tile(mesh: MicroMesh, tiling: TilingSpec) -> MicroMesh:
  """
  Glues translated, epsilon-scaled copies of a unit cell. Extracellular nodes on shared cell edges are merged,
  intracellular regions never reach a cell edge so they stay separate per cell
  """
  if mesh.tiling != TilingSpec():
    raise InvalidSpecError("tile expects a single reference cell, got counts {} epsilon {}".format(
      mesh.tiling.counts, mesh.tiling.epsilon))
  tiled = _triangulate(mesh.spec, tiling)
  log.info("Tiled", tiling.counts, "cells at epsilon", tiling.epsilon, "->", tiled.nTriangles, "triangles,",
           tiled.nVertices, "vertices")
  return tiled


def buildMesh(spec: UnitCellSpec, tiling: TilingSpec) -> MicroMesh:
  return tile(buildUnitCell(spec), tiling)


def interfaceMeasures(mesh: MicroMesh):
  """ :return: (|gamma1|, |gamma2|, |gamma12|, |I1|, |I2|, |E|) """
  areas = [math.fsum(mesh.areas[mesh.tags == tag]) for tag in (I1, I2, E)]
  return tuple([math.fsum(mesh.facets[name].lengths) for name in INTERFACES] + areas)


def components(mesh: MicroMesh, tag):
  """
  Connected components of one subdomain
  :return: (count, labels) with one label per vertex of mesh.block(tag)
  """
  block = mesh.block(tag)
  tris = mesh.triangles[mesh.tags == tag] - block.start
  n = block.stop - block.start
  rows = np.concatenate([tris[:, 0], tris[:, 1], tris[:, 2]])
  cols = np.concatenate([tris[:, 1], tris[:, 2], tris[:, 0]])
  graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
  return connected_components(graph, directed=False)


def _edgeCounts(triangles):
  edges = np.sort(np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]), axis=1)
  unique, counts = np.unique(edges, axis=0, return_counts=True)
  return unique, counts


def validate(mesh: MicroMesh):
  """
  Checks the structural invariants of a mesh
  :return: list of problem descriptions, empty when the mesh is sound
  """
  problems = []
  if np.any(mesh.areas <= 0):
    problems.append("{} triangles with non-positive area".format(int(np.sum(mesh.areas <= 0))))
  width, height = mesh.domainSize
  total = math.fsum(mesh.areas)
  if abs(total - width * height) > 1e-12 * width * height:
    problems.append("areas sum to {} instead of {}".format(total, width * height))
  if np.any(mesh.vertexTags[mesh.triangles] != mesh.tags[:, None]):
    problems.append("triangles reference vertices of another subdomain")

  edges, counts = _edgeCounts(mesh.triangles)
  if np.any(counts > 2):
    problems.append("edges shared by more than two triangles")
  openEdges = {tuple(e) for e in edges[counts == 1]}
  expected = [np.sort(mesh.exterior.nodes, axis=1)]
  for name, facets in mesh.facets.items():
    expected += [np.sort(facets.inner, axis=1), np.sort(facets.outer, axis=1)]
    if not np.array_equal(mesh.vertices[facets.inner], mesh.vertices[facets.outer]):
      problems.append("paired nodes of {} do not coincide".format(name))
  declared = {tuple(e) for e in np.concatenate(expected)}
  if openEdges != declared:
    problems.append("{} boundary edges without a facet record, {} facet records without an edge".format(
      len(openEdges - declared), len(declared - openEdges)))

  for name, (inner, outer) in (("gamma1", (I1, E)), ("gamma2", (I2, E)), ("gamma12", (I1, I2))):
    facets = mesh.facets[name]
    if np.any(mesh.vertexTags[facets.inner] != inner) or np.any(mesh.vertexTags[facets.outer] != outer):
      problems.append("{} facets connect the wrong subdomains".format(name))
  if np.any(mesh.exterior.tags != E):
    problems.append("intracellular triangles touch the outer boundary")
  return problems
