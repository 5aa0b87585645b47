import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fiberfield.errors import InvalidArgument, SolverError
from fiberfield.geometry import (SampleSet, TriMesh, build_cylinder_mesh, build_hemisphere_mesh,
                                 build_icosphere_mesh, build_unit_grid_mesh)
from fiberfield.tangent_basis import (TangentBasis, _AngleMap, _vertex_layout,
                                      connection_laplacian, cotan_laplacian, lumped_mass,
                                      trivial_planar_basis, vector_heat_basis)


def test_trivial_basis_grid():
    m = build_unit_grid_mesh(5)
    b = trivial_planar_basis(m)
    b.check()
    assert np.allclose(b.v1, [1, 0, 0]) and np.allclose(b.v2, [0, 1, 0])


def test_trivial_basis_rotated_grid():
    m = build_unit_grid_mesh(5)
    R = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    b = trivial_planar_basis(TriMesh(m.vertices @ R.T, m.triangles))
    b.check()
    assert np.allclose(b.v1[:, 2], 0)


def test_trivial_basis_rejects_curved():
    with pytest.raises(InvalidArgument):
        trivial_planar_basis(build_hemisphere_mesh(1))


@pytest.mark.parametrize("src", [0, 40])
def test_vector_heat_flat_is_identity(src):
    m = build_unit_grid_mesh(9)
    b = vector_heat_basis(m, src, [1.0, 0.0, 0.0])
    b.check()
    ang = np.arccos(np.clip(b.v1 @ [1, 0, 0], -1, 1))
    assert ang.max() < 1e-6


def test_vector_heat_fixes_source():
    m = build_hemisphere_mesh(2)
    vec = np.array([0.3, -1.0, 0.4])
    src = 10
    b = vector_heat_basis(m, src, vec)
    n = m.vertex_normals[src]
    t = vec - (vec @ n) * n
    assert np.allclose(b.v1[src], t / np.linalg.norm(t), atol=1e-8)


def test_vector_heat_cylinder_axial():
    m = build_cylinder_mesh(32, 16)
    src = 8 * 32  # middle ring
    b = vector_heat_basis(m, src, [0.0, 0.0, 1.0])
    b.check()
    z = m.vertices[:, 2]
    interior = np.abs(z) < 0.8
    ang = np.arccos(np.clip(np.abs(b.v1[interior, 2]), -1, 1))
    assert ang.max() < 1e-3


def test_vector_heat_errors():
    m = build_unit_grid_mesh(4)
    with pytest.raises(InvalidArgument):
        vector_heat_basis(m, 0, [0.0, 0.0, 1.0])
    a = build_unit_grid_mesh(3)
    two = TriMesh(np.vstack([a.vertices, a.vertices + [5, 0, 0]]),
                  np.vstack([a.triangles, a.triangles + a.n_vertices]))
    with pytest.raises(SolverError):
        vector_heat_basis(two, 0, [1.0, 0, 0])


def test_cg_option_on_small_mesh():
    m = build_unit_grid_mesh(5)
    b = vector_heat_basis(m, 12, [1.0, 1.0, 0.0], method="cg")
    assert np.allclose(b.v1, np.array([1, 1, 0]) / np.sqrt(2), atol=1e-6)


@pytest.mark.parametrize("mesh", [build_unit_grid_mesh(7), build_cylinder_mesh(12, 6),
                                  build_icosphere_mesh(2), build_hemisphere_mesh(2)],
                         ids=["grid", "cylinder", "icosphere", "hemisphere"])
def test_basis_invariants_all_meshes(mesh):
    b = vector_heat_basis(mesh)
    b.check(1e-10)


def test_laplacians():
    m = build_hemisphere_mesh(2)
    L = cotan_laplacian(m)
    assert abs(L - L.T).max() < 1e-12
    assert np.allclose(L @ np.ones(m.n_vertices), 0, atol=1e-10)
    Lc = connection_laplacian(m)
    assert abs(Lc - Lc.getH()).max() < 1e-12
    assert np.isclose(lumped_mass(m).diagonal().sum(), m.areas.sum())
    flat = build_unit_grid_mesh(5)
    # on a flat mesh a constant world field is parallel, so its local
    # complex encoding lies in the kernel
    layout = _vertex_layout(flat)
    X = np.array([np.exp(1j * _AngleMap(flat, layout, i).from_world(np.array([1.0, 0, 0])))
                  for i in range(flat.n_vertices)])
    assert np.abs(connection_laplacian(flat, layout) @ X).max() < 1e-10


@given(c=st.lists(st.floats(-10, 10), min_size=2, max_size=2))
def test_coordinate_round_trip(c):
    m = build_hemisphere_mesh(1)
    b = vector_heat_basis(m)
    coords = np.tile(c, (m.n_vertices, 1))
    v = b.reconstruct(coords)
    assert np.allclose(b.coordinates(v), coords, atol=1e-10)
    # tangent vectors are reproduced exactly
    assert np.allclose(b.reconstruct(b.coordinates(v)), v, atol=1e-10)


def test_basis_at_samples():
    m = build_hemisphere_mesh(2)
    b = vector_heat_basis(m)
    ss = SampleSet(np.arange(m.n_triangles), np.full((m.n_triangles, 3), 1 / 3), m.barycenters)
    fb = b.at(m, ss)
    fb.check()
    assert np.allclose(fb.n, m.normals)


def test_check_detects_bad_frames():
    v = np.array([[1.0, 0, 0]])
    with pytest.raises(AssertionError):
        TangentBasis(v, np.array([[0, -1.0, 0]]), np.array([[0, 0, 1.0]])).check()
