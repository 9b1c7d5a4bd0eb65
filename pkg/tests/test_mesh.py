import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neurofem.mesh import (
    CapacityError,
    Mesh,
    MeshParseError,
    classify_boundary,
    disk_mesh_rings,
    gen_annulus_mesh,
    gen_disk_mesh,
    mesh_stats,
    parse_gmsh,
    write_gmsh,
)
from neurofem.sparse import StructuralError

ONE_TRIANGLE = """$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
3
1 0 0 0
2 1 0 0
3 0 1 0
$EndNodes
$Elements
2
1 1 2 7 1 1 2
2 2 2 0 1 1 2 3
$EndElements
"""


def test_one_ring_disk():
    m = gen_disk_mesh(1.0)
    assert (m.n_nodes, len(m.elements)) == (7, 6)
    assert mesh_stats(m, classify_boundary(m, {1}))[:3] == (7, 1, 6)


@pytest.mark.parametrize("K", [1, 2, 5, 9])
def test_ring_counts(K):
    m = disk_mesh_rings(K)
    assert m.n_nodes == 1 + 3 * K * (K + 1)
    assert len(m.elements) == 6 * K * K
    m.check_boundary_facets()


@pytest.mark.parametrize("area", [0.3, 0.05, 0.01, 0.002])
def test_disk_boundary_and_area(area):
    m = gen_disk_mesh(area)
    bnd = np.unique(m.facets)
    assert np.all(np.abs(np.linalg.norm(m.nodes[bnd], axis=1) - 1.0) <= 1e-12)
    assert m.element_sizes().max() <= area
    assert np.all(m.element_sizes(signed=True) > 0)
    # total area of the inscribed polygon
    assert m.element_sizes().sum() == pytest.approx(len(bnd) / 2 * np.sin(2 * np.pi / len(bnd)), rel=1e-12)


def test_disk_area_bounds():
    with pytest.raises(ValueError):
        gen_disk_mesh(0.0)
    with pytest.raises(CapacityError):
        gen_disk_mesh(1e-9)


def test_parse_minimal_fixture():
    m = parse_gmsh(ONE_TRIANGLE)
    assert m.n_nodes == 3 and len(m.elements) == 1
    assert m.boundary_facets == [((0, 1), 7)]


def test_parse_reorients_clockwise():
    text = ONE_TRIANGLE.replace("2 2 2 0 1 1 2 3", "2 2 2 0 1 1 3 2")
    m = parse_gmsh(text)
    assert m.element_sizes(signed=True)[0] > 0


@pytest.mark.parametrize(
    "text, exc",
    [
        (ONE_TRIANGLE.replace("2.2 0 8", "4.1 0 8"), MeshParseError),
        (ONE_TRIANGLE.replace("2.2 0 8", "2.2 1 8"), MeshParseError),
        (ONE_TRIANGLE.replace("$EndElements\n", ""), MeshParseError),
        (ONE_TRIANGLE.replace("2 2 2 0 1 1 2 3", "2 2 2 0 1 1 2 9"), StructuralError),
        (ONE_TRIANGLE.replace("2 2 2 0 1 1 2 3", "2 9 2 0 1 1 2 3"), MeshParseError),
        (ONE_TRIANGLE.replace("3\n1 0 0 0", "4\n1 0 0 0"), MeshParseError),
    ],
)
def test_parse_errors(text, exc):
    with pytest.raises(exc):
        parse_gmsh(text)


def test_parse_error_names_line():
    with pytest.raises(MeshParseError, match="line 2"):
        parse_gmsh(ONE_TRIANGLE.replace("2.2 0 8", "4.1 0 8"))


@pytest.mark.parametrize("mesh", [disk_mesh_rings(4), gen_annulus_mesh(0.05)], ids=["disk", "annulus"])
def test_msh_round_trip_exact(mesh):
    assert parse_gmsh(write_gmsh(mesh)) == mesh


@pytest.mark.parametrize("mesh", [disk_mesh_rings(4), gen_annulus_mesh(0.05)], ids=["disk", "annulus"])
def test_json_round_trip_exact(mesh):
    assert Mesh.from_json(mesh.to_json()) == mesh


def test_tetrahedron_msh():
    text = """$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 0 1 0
4 0 0 1
$EndNodes
$Elements
2
1 2 2 5 1 1 2 3
2 4 2 0 1 1 3 2 4
$EndElements
"""
    m = parse_gmsh(text)
    assert m.dim == 3 and m.element_sizes(signed=True)[0] == pytest.approx(1 / 6)
    assert m.boundary_facets == [((0, 1, 2), 5)]
    assert parse_gmsh(write_gmsh(m)) == m


def test_classify_disk_all_dirichlet():
    m = disk_mesh_rings(3)
    bc = classify_boundary(m, {1})
    outer = np.flatnonzero(np.abs(np.linalg.norm(m.nodes, axis=1) - 1) < 1e-12)
    assert bc.dirichlet_nodes.tolist() == outer.tolist()
    assert bc.neumann_facets == {}


def test_classify_annulus_inner_neumann():
    m = gen_annulus_mesh(0.05, inner_radius=0.3)
    bc = classify_boundary(m, {1})
    assert set(bc.neumann_facets) == {2}
    inner = bc.neumann_facets[2]
    assert np.allclose(np.linalg.norm(m.nodes[inner.ravel()], axis=1), 0.3)


def test_classify_empty_dirichlet():
    m = disk_mesh_rings(2)
    bc = classify_boundary(m, set())
    assert len(bc.dirichlet_nodes) == 0
    assert sum(len(f) for f in bc.neumann_facets.values()) == len(m.facets)


def test_classify_unknown_marker():
    with pytest.raises(ValueError):
        classify_boundary(disk_mesh_rings(2), {9})


def test_stats_reference_triangle():
    m = Mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], [[0, 1], [1, 2], [2, 0]], [1, 1, 1])
    assert mesh_stats(m) == (3, 0, 1, 0.5)


def test_mesh_rejects_bad_input():
    with pytest.raises(StructuralError):
        Mesh([[0, 0], [1, 0], [0, 1]], [[0, 2, 1]], np.zeros((0, 2)), [])
    with pytest.raises(StructuralError):
        Mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 5]], np.zeros((0, 2)), [])
    with pytest.raises(StructuralError):
        Mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], [[0, 1]], [])


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_stats_permutation_invariant(K, seed):
    m = disk_mesh_rings(K)
    perm = np.random.default_rng(seed).permutation(m.n_nodes)
    p = m.permuted(perm)
    assert mesh_stats(p) == mesh_stats(m)
    assert mesh_stats(p, classify_boundary(p, {1})) == mesh_stats(m, classify_boundary(m, {1}))
