import numpy as np
import pytest

import MeshHandler
from MeshHandler import I1, I2, E, InvalidSpecError, TilingSpec, UnitCellSpec


def test_reference_cell_is_sound(unitCell):
  assert MeshHandler.validate(unitCell) == []


def test_reference_cell_measures(unitCell):
  gamma1, gamma2, gamma12, area1, area2, areaE = MeshHandler.interfaceMeasures(unitCell)
  assert gamma1 == pytest.approx(1.0, abs=1e-12)
  assert gamma2 == pytest.approx(1.0, abs=1e-12)
  assert gamma12 == pytest.approx(0.5, abs=1e-12)
  assert area1 == pytest.approx(0.125, abs=1e-12)
  assert area2 == pytest.approx(0.125, abs=1e-12)
  assert areaE == pytest.approx(0.75, abs=1e-12)


def test_reference_cell_layout(unitCell):
  # I1 is [0.25, 0.5] x [0.25, 0.75], I2 its mirror, and the junction sits on x = 0.5
  for tag, (xLow, xHigh) in ((I1, (0.25, 0.5)), (I2, (0.5, 0.75))):
    points = unitCell.vertices[unitCell.block(tag)]
    np.testing.assert_allclose(points.min(axis=0), [xLow, 0.25])
    np.testing.assert_allclose(points.max(axis=0), [xHigh, 0.75])
  junction = unitCell.vertices[unitCell.gamma12.innerNodes]
  np.testing.assert_allclose(junction[:, 0], 0.5, rtol=0, atol=1e-15)
  np.testing.assert_allclose([junction[:, 1].min(), junction[:, 1].max()], [0.25, 0.75])
  centroids = unitCell.centroids[unitCell.tags == E]
  assert not np.any(np.all((centroids > 0.25) & (centroids < 0.75), axis=1))


def test_single_tile_reproduces_the_unit_cell(unitCell):
  tiled = MeshHandler.tile(unitCell, TilingSpec((1, 1), 1.0))
  np.testing.assert_array_equal(tiled.vertices, unitCell.vertices)
  np.testing.assert_array_equal(tiled.triangles, unitCell.triangles)
  np.testing.assert_array_equal(tiled.tags, unitCell.tags)
  assert tiled.blocks == unitCell.blocks
  for name in MeshHandler.INTERFACES:
    np.testing.assert_array_equal(tiled.facets[name].inner, unitCell.facets[name].inner)
    np.testing.assert_array_equal(tiled.facets[name].outer, unitCell.facets[name].outer)
  assert MeshHandler.interfaceMeasures(tiled) == MeshHandler.interfaceMeasures(unitCell)


def test_vertices_are_numbered_by_subdomain(unitCell):
  tags = unitCell.vertexTags
  assert np.all(np.diff(tags) >= 0)
  assert unitCell.block(I1).start == 0
  assert unitCell.block(E).stop == unitCell.nVertices
  assert np.all(unitCell.areas > 0)


def test_facets_connect_the_right_sides(unitCell):
  tags = unitCell.vertexTags
  assert np.all(tags[unitCell.gamma1.inner] == I1) and np.all(tags[unitCell.gamma1.outer] == E)
  assert np.all(tags[unitCell.gamma2.inner] == I2) and np.all(tags[unitCell.gamma2.outer] == E)
  assert np.all(tags[unitCell.gamma12.inner] == I1) and np.all(tags[unitCell.gamma12.outer] == I2)
  np.testing.assert_array_equal(unitCell.vertices[unitCell.gamma1.innerNodes], unitCell.vertices[unitCell.gamma1.outerNodes])


def test_gap_normals_point_from_first_to_second_cell(unitCell):
  np.testing.assert_allclose(unitCell.gamma12.normals, np.tile([1.0, 0.0], (len(unitCell.gamma12), 1)))
  np.testing.assert_allclose(np.linalg.norm(unitCell.gamma1.normals, axis=1), 1.0)


def test_exterior_only_touches_extracellular(unitCell):
  assert np.all(unitCell.exterior.tags == E)
  assert np.sum(unitCell.exterior.lengths) == pytest.approx(4.0)


def test_triple_points_are_shared_by_membrane_and_gap(unitCell):
  shared = np.intersect1d(unitCell.gamma1.innerNodes, unitCell.gamma12.innerNodes)
  # the two ends of the junction
  assert len(shared) == 2


def test_tiling_scales_measures():
  tiling = TilingSpec((2, 3), 0.5)
  mesh = MeshHandler.buildMesh(UnitCellSpec(meshDensity=4), tiling)
  assert MeshHandler.validate(mesh) == []
  gamma1, gamma2, gamma12, area1, area2, areaE = MeshHandler.interfaceMeasures(mesh)
  assert gamma1 == pytest.approx(6 * 1.0 * 0.5)
  assert gamma12 == pytest.approx(6 * 0.5 * 0.5)
  assert area1 == pytest.approx(6 * 0.125 * 0.25)
  assert areaE == pytest.approx(6 * 0.75 * 0.25)
  assert mesh.domainSize == pytest.approx((1.0, 1.5))


def test_tiled_cells_stay_separate_but_extracellular_is_connected():
  mesh = MeshHandler.buildMesh(UnitCellSpec(meshDensity=4), TilingSpec((3, 2), 1.0))
  assert MeshHandler.components(mesh, I1)[0] == 6
  assert MeshHandler.components(mesh, I2)[0] == 6
  assert MeshHandler.components(mesh, E)[0] == 1


def test_tiling_cell_ids_cover_all_cells():
  mesh = MeshHandler.buildMesh(UnitCellSpec(meshDensity=4), TilingSpec((2, 2), 1.0))
  assert {tuple(c) for c in mesh.cellIds} == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_refinement_keeps_interfaces_exact():
  for density in (4, 8, 16):
    mesh = MeshHandler.buildUnitCell(UnitCellSpec(meshDensity=density))
    assert MeshHandler.interfaceMeasures(mesh)[:3] == pytest.approx((1.0, 1.0, 0.5), abs=1e-12)
    assert mesh.nTriangles > 0


def test_reference_coordinates_wrap_into_the_cell():
  mesh = MeshHandler.buildMesh(UnitCellSpec(meshDensity=4), TilingSpec((2, 2), 0.5))
  y = mesh.referenceCoordinates(np.array([[0.75, 0.6]]))
  np.testing.assert_allclose(y, [[0.5, 0.2]])


@pytest.mark.parametrize("changes", [
  {"innerMargin": 0.6},
  {"innerMargin": 0.0},
  {"splitFraction": 1.0},
  {"meshDensity": 0},
  {"meshDensity": 2.5},
  {"cellLengths": (1.0, -1.0)},
])
def test_degenerate_cells_are_rejected(changes):
  with pytest.raises(InvalidSpecError):
    UnitCellSpec(**changes)


@pytest.mark.parametrize("counts, epsilon", [((0, 1), 1.0), ((1, 1), 0.0), ((1,), 1.0)])
def test_degenerate_tilings_are_rejected(counts, epsilon):
  with pytest.raises(InvalidSpecError):
    TilingSpec(counts, epsilon)


def test_tiling_a_tiled_mesh_is_rejected():
  mesh = MeshHandler.buildMesh(UnitCellSpec(meshDensity=4), TilingSpec((2, 1), 1.0))
  with pytest.raises(InvalidSpecError):
    MeshHandler.tile(mesh, TilingSpec((2, 1), 1.0))
