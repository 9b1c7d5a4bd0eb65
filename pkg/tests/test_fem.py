import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neurofem.fem import (
    analytic_u,
    assemble,
    conventional_solution,
    forcing_f1,
    forcing_f2,
    local_load,
    local_stiffness,
    poisson_disk_system,
    rel_l2_error,
)
from neurofem.mesh import classify_boundary, disk_mesh_rings, gen_annulus_mesh, gen_disk_mesh
from neurofem.sparse import is_symmetric

REF = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]
coord = st.floats(-3, 3, allow_nan=False)


def cross2(a, b):
    return a[0] * b[1] - a[1] * b[0]


def _tri(draw_pts):
    P = np.array(draw_pts, dtype=float).reshape(3, 2)
    a = 0.5 * cross2(P[1] - P[0], P[2] - P[0])
    if abs(a) < 1e-3:
        return None
    return P if a > 0 else P[[0, 2, 1]]


def gauss_oracle(P, g, n=12):
    """integral of g over triangle P by a collapsed tensor Gauss-Legendre rule."""
    x, w = np.polynomial.legendre.leggauss(n)
    s, t = (x + 1) / 2, (x + 1) / 2
    S, T = np.meshgrid(s, t, indexing="ij")
    W = np.outer(w, w) / 4 * (1 - S)
    l1, l2 = S, T * (1 - S)
    pts = P[0] + np.multiply.outer(l1, P[1] - P[0]) + np.multiply.outer(l2, P[2] - P[0])
    bary = np.stack([1 - l1 - l2, l1, l2], axis=-1)
    area2 = abs(cross2(P[1] - P[0], P[2] - P[0]))
    return area2 * np.einsum("ab,abk->k", W * g(pts.reshape(-1, 2)).reshape(W.shape), bary)


def dunavant7(P, g):
    a1, b1 = 0.059715871789770, 0.470142064105115
    a2, b2 = 0.797426985353087, 0.101286507323456
    bary = np.array([[1 / 3] * 3, [a1, b1, b1], [b1, a1, b1], [b1, b1, a1], [a2, b2, b2], [b2, a2, b2], [b2, b2, a2]])
    w = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)
    area = 0.5 * abs(cross2(P[1] - P[0], P[2] - P[0]))
    return area * (w * g(bary @ P)) @ bary


def test_reference_stiffness():
    expected = -np.array([[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]])
    np.testing.assert_allclose(local_stiffness(REF), expected, atol=1e-12, rtol=0)


def test_degenerate_triangle():
    with pytest.raises(ValueError):
        local_stiffness([(0, 0), (1, 1), (2, 2)])
    with pytest.raises(ValueError):
        local_load([(0, 0), (1, 1), (2, 2)], forcing_f1)


@given(st.lists(coord, min_size=6, max_size=6), st.floats(0, 2 * math.pi), st.floats(-5, 5), st.floats(-5, 5))
def test_stiffness_rows_symmetry_rotation(pts, angle, dx, dy):
    P = _tri(pts)
    if P is None:
        return
    K = local_stiffness(P)
    np.testing.assert_allclose(K.sum(axis=1), 0, atol=1e-12 * max(1, np.abs(K).max()))
    np.testing.assert_allclose(K, K.T, atol=1e-14)
    R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    K2 = local_stiffness(P @ R.T + [dx, dy])
    np.testing.assert_allclose(K2, K, atol=1e-12 * max(1, np.abs(K).max()))


def test_load_constant_and_zero():
    np.testing.assert_allclose(local_load(REF, forcing_f1), [-10 / 3] * 3, atol=1e-12)
    assert not local_load(REF, lambda p: np.zeros(len(p))).any()


def test_load_quadratic_matches_quadrature_oracles():
    P = np.array(REF)
    got = local_load(P, forcing_f2)
    np.testing.assert_allclose(got, dunavant7(P, forcing_f2), atol=1e-12)
    np.testing.assert_allclose(got, gauss_oracle(P, forcing_f2), atol=1e-12)


@given(st.lists(coord, min_size=6, max_size=6), st.lists(st.floats(-4, 4), min_size=6, max_size=6))
def test_load_exact_for_any_quadratic(pts, c):
    P = _tri(pts)
    if P is None:
        return
    g = lambda p: c[0] + c[1] * p[:, 0] + c[2] * p[:, 1] + c[3] * p[:, 0] ** 2 + c[4] * p[:, 0] * p[:, 1] + c[5] * p[:, 1] ** 2  # noqa: E731
    ref = gauss_oracle(P, g)
    np.testing.assert_allclose(local_load(P, g), ref, atol=1e-10 * max(1, np.abs(ref).max()))


def test_evaluators():
    assert analytic_u([(0, 0)])[0] == 5.0
    assert analytic_u([(0.5, 0.5)])[0] == 2.5
    assert analytic_u([(math.cos(1.0), math.sin(1.0))])[0] == pytest.approx(0.0, abs=1e-14)
    assert forcing_f1([(0.3, -0.2)])[0] == -20.0
    assert forcing_f2([(0.25, -0.13)])[0] == 12.0
    assert forcing_f2([(0.0, 0.0)])[0] == pytest.approx(7.236, abs=1e-12)


def test_one_ring_system():
    # six equilateral unit triangles: A = -6 * (2 cot 60 / 2) = -2 sqrt 3, b = -20 * 6 * (sqrt3/4) / 3
    s = assemble(disk_mesh_rings(1), forcing_f1, classify_boundary(disk_mesh_rings(1), {1}))
    assert s.n == 1
    assert s.A.to_dense()[0, 0] == pytest.approx(-2 * math.sqrt(3), rel=1e-12)
    assert s.b[0] == pytest.approx(-10 * math.sqrt(3), rel=1e-12)
    assert conventional_solution(s).x[0] == pytest.approx(5.0, rel=1e-12)


def test_zero_forcing():
    m = gen_disk_mesh(0.05)
    s = assemble(m, lambda p: np.zeros(len(p)), classify_boundary(m, {1}))
    assert not s.b.any()
    assert not conventional_solution(s).x.any()


def test_sparsity_is_node_adjacency():
    s = poisson_disk_system(0.05)
    m = s.mesh
    to_sys = s.interior_map
    expected = {(i, i) for i in range(s.n)}
    for a, b in m.edges().tolist():
        if to_sys[a] >= 0 and to_sys[b] >= 0:
            expected |= {(to_sys[a], to_sys[b]), (to_sys[b], to_sys[a])}
    got = set(zip(s.A.row_indices().tolist(), s.A.col_idx.tolist()))
    assert got == expected


@pytest.mark.parametrize("area", [0.3, 0.05, 0.02])
def test_symmetric_negative_definite(area):
    s = poisson_disk_system(area)
    assert is_symmetric(s.A)
    assert np.linalg.eigvalsh(-s.A.to_dense()).min() > 0
    assert s.n == s.mesh.n_nodes - 6 * math.ceil(-0.5 + math.sqrt(0.25 + (s.mesh.n_nodes - 1) / 3))


def test_neumann_load_total():
    m = gen_annulus_mesh(0.05, inner_radius=0.3)
    bc = classify_boundary(m, {1})
    s = assemble(m, lambda p: np.zeros(len(p)), bc, {2: 1.5})
    inner = bc.neumann_facets[2]
    perimeter = np.linalg.norm(m.nodes[inner[:, 1]] - m.nodes[inner[:, 0]], axis=1).sum()
    assert s.b.sum() == pytest.approx(1.5 * perimeter, rel=1e-12)
    with pytest.raises(ValueError):
        assemble(m, forcing_f1, bc)


def test_rel_l2_error_basics():
    s = poisson_disk_system(0.05)
    assert rel_l2_error(s, np.zeros(s.n)) == pytest.approx(1.0)
    x = conventional_solution(s).x
    assert 0 < rel_l2_error(s, x) < 0.05


def test_conventional_error_decreases():
    errs = []
    for a in (0.05, 0.02, 0.005, 0.002):
        s = poisson_disk_system(a)
        x = conventional_solution(s).x
        errs.append(np.linalg.norm(x - analytic_u(s.points())) / np.linalg.norm(analytic_u(s.points())))
    assert all(e2 < e1 for e1, e2 in zip(errs, errs[1:]))


def test_nodal_error_slope_asymptotic():
    hs, errs = [], []
    for a in (0.002, 0.001, 0.0005, 0.0002):
        s = poisson_disk_system(a)
        sol = conventional_solution(s)
        assert sol.converged
        u = analytic_u(s.points())
        hs.append(math.sqrt(s.mesh.element_sizes().mean()))
        errs.append(np.linalg.norm(sol.x - u) / np.linalg.norm(u))
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(slope - 2.0) <= 0.3
