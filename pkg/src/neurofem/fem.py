"""P1 finite elements for the Poisson problem on triangle meshes.

Sign convention: ``A_ij = -integral(grad phi_i . grad phi_j)`` and
``b_i = integral(phi_i f)``, so ``A`` is symmetric negative definite and the
constant forcing ``f = -20`` yields a positive solution.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .mesh import BoundaryClass, Mesh
from .sparse import CsrMatrix, csr_from_arrays, mm_write

ScalarField = Callable[[np.ndarray], np.ndarray]

DEGENERATE_AREA = 1e-14

# integral of phi_i against the quadratic interpolant of f, divided by the area;
# columns: vertex 0, 1, 2, then midpoints of edges (0,1), (1,2), (2,0)
_LOAD_WEIGHTS = np.array(
    [
        [1 / 30, -1 / 60, -1 / 60, 2 / 15, 1 / 15, 2 / 15],
        [-1 / 60, 1 / 30, -1 / 60, 2 / 15, 2 / 15, 1 / 15],
        [-1 / 60, -1 / 60, 1 / 30, 1 / 15, 2 / 15, 2 / 15],
    ]
)


def analytic_u(points) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=float))
    return 5.0 * (1.0 - p[:, 0] ** 2 - p[:, 1] ** 2)


def forcing_f1(points) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=float))
    return np.full(len(p), -20.0)


def forcing_f2(points) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=float))
    return 12.0 - 60.0 * (p[:, 0] - 0.25) ** 2 - 60.0 * (p[:, 1] + 0.13) ** 2


FORCINGS: dict[str, ScalarField] = {"f1": forcing_f1, "f2": forcing_f2}


def _signed_areas(P: np.ndarray) -> np.ndarray:
    e1 = P[:, 1] - P[:, 0]
    e2 = P[:, 2] - P[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _check_areas(area: np.ndarray) -> None:
    bad = np.flatnonzero(area <= DEGENERATE_AREA)
    if len(bad):
        raise ValueError(f"degenerate or clockwise triangle (signed area {area[bad[0]]:.3e}) at element {bad[0]}")


def _stiffness_batch(P: np.ndarray) -> np.ndarray:
    """(m, 3, 3) local matrices -Area * grad(phi_i).grad(phi_j) for (m, 3, 2) vertices."""
    area = _signed_areas(P)
    _check_areas(area)
    # grad(phi_i) = rot90(opposite edge) / (2 * area)
    edges = np.stack([P[:, 2] - P[:, 1], P[:, 0] - P[:, 2], P[:, 1] - P[:, 0]], axis=1)
    grads = np.stack([-edges[..., 1], edges[..., 0]], axis=-1) / (2.0 * area[:, None, None])
    return -area[:, None, None] * np.einsum("mik,mjk->mij", grads, grads)


def local_stiffness(vertices) -> np.ndarray:
    P = np.asarray(vertices, dtype=float).reshape(1, 3, 2)
    return _stiffness_batch(P)[0]


def _load_batch(P: np.ndarray, f: ScalarField) -> np.ndarray:
    area = _signed_areas(P)
    _check_areas(area)
    mids = 0.5 * (P + P[:, [1, 2, 0]])
    samples = np.concatenate([P, mids], axis=1)  # (m, 6, 2)
    fv = np.asarray(f(samples.reshape(-1, 2)), dtype=float).reshape(-1, 6)
    return area[:, None] * (fv @ _LOAD_WEIGHTS.T)


def local_load(vertices, f: ScalarField) -> np.ndarray:
    """integral(phi_i f) over one triangle, exact when f is a polynomial of degree <= 2."""
    P = np.asarray(vertices, dtype=float).reshape(1, 3, 2)
    return _load_batch(P, f)[0]


@dataclass
class FemSystem:
    A: CsrMatrix
    b: np.ndarray
    interior_nodes: np.ndarray  # system index -> mesh node
    mesh: Mesh | None = None

    @property
    def n(self) -> int:
        return self.A.n_rows

    @property
    def interior_map(self) -> np.ndarray:
        """Mesh node -> system index, -1 for eliminated nodes."""
        n_mesh = self.mesh.n_nodes if self.mesh is not None else int(self.interior_nodes.max()) + 1
        m = np.full(n_mesh, -1, dtype=np.int64)
        m[self.interior_nodes] = np.arange(len(self.interior_nodes))
        return m

    def points(self) -> np.ndarray:
        if self.mesh is None:
            raise ValueError("system has no mesh attached")
        return self.mesh.nodes[self.interior_nodes]

    def with_rhs(self, b) -> FemSystem:
        return FemSystem(self.A, np.asarray(b, dtype=float), self.interior_nodes, self.mesh)

    def export_csv(self) -> str:
        out = io.StringIO()
        out.write("system_index,mesh_node,x,y,b_value\n")
        pts = self.points() if self.mesh is not None else np.full((self.n, 2), np.nan)
        for k, (node, p, bv) in enumerate(zip(self.interior_nodes.tolist(), pts.tolist(), self.b.tolist())):
            out.write(f"{k},{node},{p[0]!r},{p[1]!r},{bv!r}\n")
        return out.getvalue()

    def export_mtx(self) -> str:
        return mm_write(self.A)


def assemble(
    mesh: Mesh,
    f: ScalarField,
    bc: BoundaryClass,
    neumann_flux: Mapping[int, float] | None = None,
) -> FemSystem:
    """Global P1 system with homogeneous Dirichlet rows/columns removed.

    ``neumann_flux[marker]`` is a constant inward flux ``g``; each Neumann edge
    of length ``L`` adds ``g * L / 2`` to the load of both endpoints.
    """
    if mesh.dim != 2:
        raise ValueError("native assembly supports 2D triangle meshes only")
    neumann_flux = dict(neumann_flux or {})
    missing = [m for m in bc.neumann_facets if m not in neumann_flux]
    if missing:
        raise ValueError(f"no Neumann flux given for markers {missing}")

    n_mesh = mesh.n_nodes
    keep = np.ones(n_mesh, dtype=bool)
    keep[bc.dirichlet_nodes] = False
    interior = np.flatnonzero(keep)
    if len(interior) == 0:
        raise ValueError("mesh has no interior (non-Dirichlet) nodes")
    to_sys = np.full(n_mesh, -1, dtype=np.int64)
    to_sys[interior] = np.arange(len(interior))

    T = mesh.elements
    P = mesh.nodes[T]
    Ke = _stiffness_batch(P)
    be = _load_batch(P, f)

    b_full = np.bincount(T.ravel(), weights=be.ravel(), minlength=n_mesh)
    for marker, facets in bc.neumann_facets.items():
        g = float(neumann_flux[marker])
        if g == 0.0 or len(facets) == 0:
            continue
        length = np.linalg.norm(mesh.nodes[facets[:, 1]] - mesh.nodes[facets[:, 0]], axis=1)
        b_full += np.bincount(facets.ravel(), weights=np.repeat(g * length / 2.0, 2), minlength=n_mesh)

    rows = np.repeat(T, 3, axis=1).ravel()
    cols = np.tile(T, (1, 3)).ravel()
    vals = Ke.ravel()
    r, c = to_sys[rows], to_sys[cols]
    ok = (r >= 0) & (c >= 0)
    A = csr_from_arrays(r[ok], c[ok], vals[ok], len(interior), len(interior))
    return FemSystem(A, b_full[interior], interior, mesh)


def poisson_disk_system(max_area: float, forcing: str | ScalarField = "f1") -> FemSystem:
    """Benchmark problem: unit disk, u = 0 on the circle."""
    from .mesh import classify_boundary, gen_disk_mesh

    f = FORCINGS[forcing] if isinstance(forcing, str) else forcing
    mesh = gen_disk_mesh(max_area)
    return assemble(mesh, f, classify_boundary(mesh, {1}))


def conventional_solution(system: FemSystem, tol: float = 1e-12):
    """CG on the positive definite orientation (-A, -b)."""
    from .sparse import cg_solve

    return cg_solve(-system.A, -system.b, tol=tol)


# degree-5 seven-point triangle rule: barycentric points and weights (sum 1)
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_QUAD7_BARY = np.array(
    [[1 / 3, 1 / 3, 1 / 3], [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
     [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2]]
)
_QUAD7_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


def rel_l2_error(system: FemSystem, x, u: ScalarField = analytic_u) -> float:
    """Relative L2(mesh) error of the P1 function with interior values ``x``
    (zero on eliminated nodes) against ``u``."""
    mesh = system.mesh
    if mesh is None:
        raise ValueError("system has no mesh attached")
    full = np.zeros(mesh.n_nodes)
    full[system.interior_nodes] = np.asarray(x, dtype=float)
    P = mesh.nodes[mesh.elements]
    area = np.abs(_signed_areas(P))
    qp = np.einsum("qk,ekd->eqd", _QUAD7_BARY, P)
    uh = np.einsum("qk,ek->eq", _QUAD7_BARY, full[mesh.elements])
    ue = np.asarray(u(qp.reshape(-1, 2)), dtype=float).reshape(uh.shape)
    w = area[:, None] * _QUAD7_W
    return float(np.sqrt((w * (uh - ue) ** 2).sum() / (w * ue**2).sum()))
