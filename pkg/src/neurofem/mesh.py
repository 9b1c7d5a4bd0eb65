"""Triangle/tetrahedron meshes: a deterministic disk generator, Gmsh 2.2 I/O, boundary classification."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .sparse import StructuralError

MAX_NODES = 10**7
# the ring generator yields 6*K**2 triangles on the unit disk
TRIANGLES_PER_RING_SQUARED = 6


class MeshParseError(ValueError):
    pass


class CapacityError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    nodes: np.ndarray
    elements: np.ndarray
    facets: np.ndarray
    facet_markers: np.ndarray

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        if nodes.ndim != 2 or nodes.shape[1] not in (2, 3):
            raise StructuralError("nodes must be an (n, 2) or (n, 3) array")
        k = nodes.shape[1] + 1
        elements = np.asarray(self.elements, dtype=np.int64).reshape(-1, k)
        facets = np.asarray(self.facets, dtype=np.int64).reshape(-1, k - 1)
        markers = np.asarray(self.facet_markers, dtype=np.int64).ravel()
        if len(markers) != len(facets):
            raise StructuralError("one marker per boundary facet is required")
        for name, arr in (("element", elements), ("facet", facets)):
            if arr.size and (arr.min() < 0 or arr.max() >= len(nodes)):
                raise StructuralError(f"{name} references a node outside 0..{len(nodes) - 1}")
            if arr.size and np.any(np.sort(arr, axis=1)[:, 1:] == np.sort(arr, axis=1)[:, :-1]):
                raise StructuralError(f"{name} with repeated vertices")
        for a in (nodes, elements, facets, markers):
            a.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "facets", facets)
        object.__setattr__(self, "facet_markers", markers)
        if self.dim == 2 and len(elements) and np.any(self.element_sizes(signed=True) <= 0):
            raise StructuralError("2D triangles must be counterclockwise and non-degenerate")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mesh):
            return NotImplemented
        return all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(
                (self.nodes, self.elements, self.facets, self.facet_markers),
                (other.nodes, other.elements, other.facets, other.facet_markers),
            )
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def boundary_facets(self) -> list[tuple[tuple[int, ...], int]]:
        return [(tuple(f), int(m)) for f, m in zip(self.facets.tolist(), self.facet_markers.tolist())]

    def element_sizes(self, signed: bool = False) -> np.ndarray:
        """Triangle areas in 2D, tetrahedron volumes in 3D."""
        p = self.nodes[self.elements]
        if self.dim == 2:
            e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
            s = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        else:
            s = np.einsum("ij,ij->i", p[:, 1] - p[:, 0], np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0])) / 6.0
        return s if signed else np.abs(s)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted, as an (m, 2) array."""
        k = self.elements.shape[1]
        pairs = [(a, b) for a in range(k) for b in range(a + 1, k)]
        e = np.concatenate([self.elements[:, [a, b]] for a, b in pairs])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def check_boundary_facets(self) -> None:
        """Raise unless every boundary facet is a face of exactly one element."""
        k = self.elements.shape[1]
        faces = np.concatenate([np.delete(self.elements, j, axis=1) for j in range(k)])
        faces.sort(axis=1)
        uniq, counts = np.unique(faces, axis=0, return_counts=True)
        lookup = {tuple(f): c for f, c in zip(uniq.tolist(), counts.tolist())}
        for f in np.sort(self.facets, axis=1).tolist():
            if lookup.get(tuple(f), 0) != 1:
                raise StructuralError(f"boundary facet {f} is not a face of exactly one element")

    def permuted(self, perm) -> Mesh:
        """Relabel nodes: new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return Mesh(self.nodes[perm], inv[self.elements], inv[self.facets], self.facet_markers)

    # -- JSON interchange --------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(
            {
                "nodes": self.nodes.tolist(),
                "elements": self.elements.tolist(),
                "boundary_facets": [{"vertices": list(f), "marker": m} for f, m in self.boundary_facets],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> Mesh:
        doc = json.loads(text)
        nodes = np.asarray(doc["nodes"], dtype=float)
        k = nodes.shape[1]
        bf = doc.get("boundary_facets", [])
        facets = np.asarray([f["vertices"] for f in bf], dtype=np.int64).reshape(-1, k)
        markers = np.asarray([f["marker"] for f in bf], dtype=np.int64)
        return cls(nodes, np.asarray(doc["elements"]), facets, markers)


@dataclass
class BoundaryClass:
    dirichlet_nodes: np.ndarray
    neumann_facets: dict[int, np.ndarray] = field(default_factory=dict)


# -- generators ----------------------------------------------------------------


def _sweep(inner: list[int], outer: list[int], inner_phase: float, outer_phase: float) -> list[tuple[int, int, int]]:
    """Triangulate the band between two closed rings by merging their angles."""
    ni, no = len(inner), len(outer)
    if ni == 1:
        return [(inner[0], outer[j], outer[(j + 1) % no]) for j in range(no)]
    tris = []
    i = j = 0
    while i < ni or j < no:
        next_outer = (j + 1 + outer_phase) / no
        next_inner = (i + 1 + inner_phase) / ni
        if j < no and (i >= ni or next_outer <= next_inner):
            tris.append((inner[i % ni], outer[j], outer[(j + 1) % no]))
            j += 1
        else:
            tris.append((inner[i % ni], outer[j % no], inner[(i + 1) % ni]))
            i += 1
    return tris


def _ring_mesh(radii: list[float], counts: list[int]) -> tuple[np.ndarray, np.ndarray, list[list[int]]]:
    pts: list[tuple[float, float]] = []
    rings: list[list[int]] = []
    for r, m in zip(radii, counts):
        idx = []
        for j in range(m):
            if r == 0.0:
                pts.append((0.0, 0.0))
            else:
                a = 2.0 * math.pi * j / m
                pts.append((r * math.cos(a), r * math.sin(a)))
            idx.append(len(pts) - 1)
        rings.append(idx)
    tris = []
    for k in range(1, len(rings)):
        tris.extend(_sweep(rings[k - 1], rings[k], 0.0, 0.0))
    return np.asarray(pts), np.asarray(tris, dtype=np.int64), rings


def _ring_edges(ring: list[int], reverse: bool = False) -> np.ndarray:
    e = np.array([(ring[j], ring[(j + 1) % len(ring)]) for j in range(len(ring))], dtype=np.int64)
    return e[:, ::-1] if reverse else e


def disk_rings_for_area(max_area: float) -> int:
    return max(1, math.ceil(math.sqrt(math.pi / (max_area * TRIANGLES_PER_RING_SQUARED))))


def gen_disk_mesh(max_area: float) -> Mesh:
    """Concentric-ring triangulation of the unit disk.

    Ring ``k`` of ``K`` sits at radius ``k/K`` and carries ``6k`` evenly spaced
    nodes; the ring count starts from the area estimate and grows until every
    triangle satisfies ``area <= max_area``. Outer-ring edges get marker 1.
    """
    if not (0 < max_area < math.pi):
        raise ValueError(f"max_area must lie in (0, pi), got {max_area}")
    K = disk_rings_for_area(max_area)
    while True:
        if 1 + 3 * K * (K + 1) > MAX_NODES:
            raise CapacityError(f"max_area={max_area} needs more than {MAX_NODES} nodes")
        mesh = disk_mesh_rings(K)
        if mesh.element_sizes().max() <= max_area:
            return mesh
        K += 1


def disk_mesh_rings(K: int) -> Mesh:
    radii = [k / K for k in range(K + 1)]
    counts = [1] + [6 * k for k in range(1, K + 1)]
    pts, tris, rings = _ring_mesh(radii, counts)
    facets = _ring_edges(rings[-1])
    return Mesh(pts, tris, facets, np.ones(len(facets), dtype=np.int64))


def gen_annulus_mesh(max_area: float, inner_radius: float = 0.3, outer_marker: int = 1, inner_marker: int = 2) -> Mesh:
    """Ring triangulation of ``inner_radius <= r <= 1`` with separately marked boundaries."""
    if not 0 < inner_radius < 1:
        raise ValueError("inner_radius must lie in (0, 1)")
    if not (0 < max_area < math.pi):
        raise ValueError(f"max_area must lie in (0, pi), got {max_area}")
    width = 1.0 - inner_radius
    h = math.sqrt(4.0 * max_area / math.sqrt(3.0))
    K = max(1, math.ceil(width / h))
    while True:
        radii = [inner_radius + width * k / K for k in range(K + 1)]
        counts = [max(6, math.ceil(2 * math.pi * r * K / width)) for r in radii]
        if sum(counts) > MAX_NODES:
            raise CapacityError(f"max_area={max_area} needs more than {MAX_NODES} nodes")
        pts, tris, rings = _ring_mesh(radii, counts)
        facets = np.concatenate([_ring_edges(rings[-1]), _ring_edges(rings[0], reverse=True)])
        markers = np.concatenate(
            [np.full(len(rings[-1]), outer_marker), np.full(len(rings[0]), inner_marker)]
        )
        mesh = Mesh(pts, tris, facets, markers)
        if mesh.element_sizes().max() <= max_area:
            return mesh
        K += 1


# -- boundary handling -----------------------------------------------------------


def classify_boundary(mesh: Mesh, dirichlet_markers) -> BoundaryClass:
    dirichlet_markers = set(int(m) for m in dirichlet_markers)
    present = set(mesh.facet_markers.tolist())
    unknown = dirichlet_markers - present
    if unknown:
        raise ValueError(f"markers {sorted(unknown)} do not appear on any boundary facet")
    is_d = np.isin(mesh.facet_markers, list(dirichlet_markers))
    dirichlet = np.unique(mesh.facets[is_d]) if is_d.any() else np.zeros(0, dtype=np.int64)
    neumann = {m: mesh.facets[mesh.facet_markers == m] for m in sorted(present - dirichlet_markers)}
    return BoundaryClass(dirichlet.astype(np.int64), neumann)


def mesh_stats(mesh: Mesh, bc: BoundaryClass | None = None) -> tuple[int, int, int, float]:
    """(n_nodes, n_interior, n_elements, max element area or volume).

    Interior means "not Dirichlet" when a classification is given, otherwise
    "not on any boundary facet".
    """
    if bc is not None:
        n_boundary = len(bc.dirichlet_nodes)
    else:
        n_boundary = len(np.unique(mesh.facets)) if mesh.facets.size else 0
    sizes = mesh.element_sizes()
    return (mesh.n_nodes, mesh.n_nodes - n_boundary, len(mesh.elements), float(sizes.max()) if len(sizes) else 0.0)


# -- Gmsh MSH 2.2 (ASCII) -------------------------------------------------------

_NODES_PER_TYPE = {1: 2, 2: 3, 4: 4, 15: 1}


def _sections(stream: TextIO):
    """Yield (name, [(lineno, text), ...]) for each $Section ... $EndSection."""
    current = None
    body: list[tuple[int, str]] = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("$"):
            if current is None:
                current, body = line[1:], []
                start = lineno
            elif line == f"$End{current}":
                yield current, body, start
                current = None
            else:
                raise MeshParseError(f"line {lineno}: unexpected {line} inside ${current}")
        elif current is not None:
            body.append((lineno, line))
    if current is not None:
        raise MeshParseError(f"section ${current} is never closed")


def parse_gmsh(stream: TextIO | str) -> Mesh:
    """Read an ASCII MSH 2.2 file with lines, triangles, tetrahedra and points.

    Nodes are renumbered densely in file order. In 2D, tagged lines become
    boundary facets; in 3D, tagged triangles do. The physical tag (first tag)
    becomes the facet marker.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    nodes_raw: list[tuple[int, float, float, float]] = []
    elems: dict[int, list[tuple[list[int], int, int]]] = {t: [] for t in _NODES_PER_TYPE}
    seen_format = False
    for name, body, start in _sections(stream):
        if name == "MeshFormat":
            if not body:
                raise MeshParseError(f"line {start}: empty $MeshFormat")
            lineno, text = body[0]
            parts = text.split()
            if parts[0] != "2.2":
                raise MeshParseError(f"line {lineno}: unsupported MSH version {parts[0]} (only 2.2)")
            if len(parts) > 1 and parts[1] != "0":
                raise MeshParseError(f"line {lineno}: binary MSH files are not supported")
            seen_format = True
        elif name == "Nodes":
            count = int(body[0][1].split()[0])
            if len(body) - 1 != count:
                raise MeshParseError(f"line {start}: $Nodes declares {count} nodes, found {len(body) - 1}")
            for lineno, text in body[1:]:
                p = text.split()
                try:
                    nodes_raw.append((int(p[0]), float(p[1]), float(p[2]), float(p[3]) if len(p) > 3 else 0.0))
                except (ValueError, IndexError):
                    raise MeshParseError(f"line {lineno}: bad node record {text!r}") from None
        elif name == "Elements":
            count = int(body[0][1].split()[0])
            if len(body) - 1 != count:
                raise MeshParseError(f"line {start}: $Elements declares {count} elements, found {len(body) - 1}")
            for lineno, text in body[1:]:
                p = [int(t) for t in text.split()]
                etype, ntags = p[1], p[2]
                if etype not in _NODES_PER_TYPE:
                    raise MeshParseError(f"line {lineno}: unsupported element type {etype}")
                tags = p[3 : 3 + ntags]
                verts = p[3 + ntags :]
                if len(verts) != _NODES_PER_TYPE[etype]:
                    raise MeshParseError(f"line {lineno}: element type {etype} needs {_NODES_PER_TYPE[etype]} nodes")
                elems[etype].append((verts, tags[0] if tags else 0, lineno))
        # $PhysicalNames and other sections are ignored
    if not seen_format:
        raise MeshParseError("missing $MeshFormat section")

    ids = {nid: k for k, (nid, *_rest) in enumerate(nodes_raw)}
    coords = np.array([r[1:] for r in nodes_raw], dtype=float).reshape(-1, 3)

    def remap(records):
        out = []
        for verts, _tag, lineno in records:
            try:
                out.append([ids[v] for v in verts])
            except KeyError as exc:
                raise StructuralError(f"line {lineno}: element references undefined node {exc.args[0]}") from None
        return out

    if elems[4]:
        dim, cells, facet_recs = 3, remap(elems[4]), elems[2]
    else:
        dim, cells, facet_recs = 2, remap(elems[2]), elems[1]
        if np.any(coords[:, 2] != 0):
            raise MeshParseError("triangle mesh with non-zero z coordinates is not supported")
        coords = coords[:, :2]
    if not cells:
        raise MeshParseError("file contains no triangles or tetrahedra")
    cells_arr = np.asarray(cells, dtype=np.int64)
    facets = np.asarray(remap(facet_recs), dtype=np.int64).reshape(-1, dim)
    markers = np.asarray([t for _v, t, _l in facet_recs], dtype=np.int64)
    remap(elems[15])  # validate point references

    cells_arr = _orient(coords, cells_arr)
    return Mesh(coords, cells_arr, facets, markers)


def _orient(coords: np.ndarray, cells: np.ndarray) -> np.ndarray:
    p = coords[cells]
    if coords.shape[1] == 2:
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        s = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    else:
        s = np.einsum("ij,ij->i", p[:, 1] - p[:, 0], np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]))
    cells = cells.copy()
    flip = s < 0
    cells[flip, 1], cells[flip, 2] = cells[flip, 2].copy(), cells[flip, 1].copy()
    return cells


def write_gmsh(mesh: Mesh, stream: TextIO | None = None) -> str:
    out = io.StringIO()
    out.write("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n")
    out.write(f"$Nodes\n{mesh.n_nodes}\n")
    for i, p in enumerate(mesh.nodes.tolist(), start=1):
        z = p[2] if mesh.dim == 3 else 0.0
        out.write(f"{i} {p[0]!r} {p[1]!r} {z!r}\n")
    out.write("$EndNodes\n")
    facet_type, cell_type = (1, 2) if mesh.dim == 2 else (2, 4)
    n_el = len(mesh.facets) + len(mesh.elements)
    out.write(f"$Elements\n{n_el}\n")
    k = 1
    for f, m in zip(mesh.facets.tolist(), mesh.facet_markers.tolist()):
        out.write(f"{k} {facet_type} 2 {m} {m} " + " ".join(str(v + 1) for v in f) + "\n")
        k += 1
    for e in mesh.elements.tolist():
        out.write(f"{k} {cell_type} 2 0 0 " + " ".join(str(v + 1) for v in e) + "\n")
        k += 1
    out.write("$EndElements\n")
    text = out.getvalue()
    if stream is not None:
        stream.write(text)
    return text
