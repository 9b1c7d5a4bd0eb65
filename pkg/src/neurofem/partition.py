"""Greedy centroid partitioning of mesh nodes over chips, and round-robin
placement of each chip's nodes onto its cores."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .mesh import CapacityError, Mesh


@dataclass
class Partition:
    assignment: np.ndarray  # node -> chip
    chip_positions: np.ndarray  # (n_chips, dim)
    n_chips: int
    iterations_run: int
    changed_last_iteration: int = 0  # nodes whose chip changed in the final iteration
    seed: int = 0

    @property
    def loads(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_chips)


@dataclass
class CoreLayout:
    chip_of_node: np.ndarray
    core_of_node: np.ndarray
    neurons_per_core: np.ndarray  # (n_chips, cores_per_chip)
    npm: int

    def core_pairs(self) -> np.ndarray:
        return np.stack([self.chip_of_node, self.core_of_node], axis=1)


def _assign(points: np.ndarray, positions: np.ndarray, target: float, balance_weight: float) -> np.ndarray:
    """Sequential assignment in node order; a chip's distance is inflated by
    its overload relative to ``target`` at the time the node is placed."""
    n, k = len(points), len(positions)
    dist = np.sqrt(((points[:, None, :] - positions[None, :, :]) ** 2).sum(axis=2))
    load = np.zeros(k)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        penalty = 1.0 + balance_weight * np.maximum(0.0, load / target - 1.0)
        c = int(np.argmin(dist[i] * penalty))
        out[i] = c
        load[c] += 1
    return out


def _relocate_empty(points: np.ndarray, positions: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    loads = np.bincount(assignment, minlength=len(positions))
    positions = positions.copy()
    for c in np.flatnonzero(loads == 0):
        d = ((points - positions[c]) ** 2).sum(axis=1)
        positions[c] = points[int(np.argmin(d))]
    return positions


def _fill_empty(points: np.ndarray, positions: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    """Give every still-empty chip the closest node of a chip with spare nodes."""
    assignment = assignment.copy()
    k = len(positions)
    for c in range(k):
        loads = np.bincount(assignment, minlength=k)
        if loads[c]:
            continue
        donors = loads[assignment] > 1
        d = np.where(donors, ((points - positions[c]) ** 2).sum(axis=1), np.inf)
        assignment[int(np.argmin(d))] = c
    return assignment


def partition_mesh(
    mesh: Mesh | np.ndarray,
    n_chips: int,
    iterations: int = 16,
    balance_weight: float = 1.0,
    seed: int = 0,
) -> Partition:
    """Alternate nearest-chip assignment (load weighted) and centroid updates.

    Chips start on ``n_chips`` distinct nodes drawn by the seeded generator.
    A chip left empty by an assignment pass is moved onto the node closest to
    it before the next pass; chips still empty at the end take their closest
    node from a chip that can spare one.
    """
    points = np.asarray(mesh.nodes if isinstance(mesh, Mesh) else mesh, dtype=float)
    n = len(points)
    if not 1 <= n_chips <= n:
        raise ValueError(f"n_chips must lie in [1, {n}], got {n_chips}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    positions = points[np.sort(rng.choice(n, size=n_chips, replace=False))].copy()
    target = n / n_chips
    assignment = np.full(n, -1, dtype=np.int64)
    changed = n
    for _ in range(iterations):
        new = _assign(points, positions, target, balance_weight)
        changed = int(np.count_nonzero(new != assignment))
        assignment = new
        loads = np.bincount(assignment, minlength=n_chips)
        sums = np.zeros_like(positions)
        np.add.at(sums, assignment, points)
        filled = loads > 0
        positions[filled] = sums[filled] / loads[filled, None]
        positions = _relocate_empty(points, positions, assignment)
    assignment = _fill_empty(points, positions, assignment)
    return Partition(assignment, positions, n_chips, iterations, changed, seed)


def assign_cores(
    partition: Partition, npm: int, cores_per_chip: int = 128, max_neurons_per_core: int = 512
) -> CoreLayout:
    """Within each chip, the node of rank ``r`` (by node index) goes to core
    ``r mod cores_per_chip``."""
    if npm < 1 or cores_per_chip < 1:
        raise ValueError("npm and cores_per_chip must be >= 1")
    loads = partition.loads
    for chip, load in enumerate(loads.tolist()):
        need = npm * -(-load // cores_per_chip)
        if need > max_neurons_per_core:
            raise CapacityError(
                f"chip {chip}: {load} nodes x {npm} neurons need {need} neurons on a core (limit {max_neurons_per_core})"
            )
    a = partition.assignment
    order = np.argsort(a, kind="stable")
    starts = np.concatenate([[0], np.cumsum(loads)[:-1]])
    rank = np.empty(len(a), dtype=np.int64)
    rank[order] = np.arange(len(a)) - np.repeat(starts, loads)
    core = rank % cores_per_chip
    per_core = np.zeros((partition.n_chips, cores_per_chip), dtype=np.int64)
    np.add.at(per_core, (a, core), npm)
    return CoreLayout(a.copy(), core, per_core, npm)


def partition_metrics(partition: Partition, net) -> tuple[int, float, float]:
    """(edge_cut, load_std / mean load, max load / mean load).

    ``edge_cut`` counts the off-diagonal node blocks of the slow weights whose
    two nodes sit on different chips, each ordered pair once. ``net`` is an
    :class:`SnnNetwork`, a :class:`FemSystem` or a :class:`CsrMatrix`; for the
    first two, system unknowns are mapped back to mesh nodes when possible.
    """
    A = getattr(net, "A", net)
    system = getattr(net, "system_ref", net)
    interior = getattr(system, "interior_nodes", None)
    a = partition.assignment
    if A.n_rows == len(a):
        chip = a
    elif interior is not None and len(interior) == A.n_rows and interior.max(initial=-1) < len(a):
        chip = a[interior]
    else:
        raise ValueError("partition does not cover the network's nodes")
    rows = A.row_indices()
    off = rows != A.col_idx
    cut = int(np.count_nonzero(off & (chip[rows] != chip[A.col_idx]) & (A.values != 0)))
    loads = partition.loads.astype(float)
    mean = loads.mean()
    return cut, float(loads.std() / mean), float(loads.max() / mean)


def partition_csv(partition: Partition, layout: CoreLayout | None = None) -> str:
    out = io.StringIO()
    out.write("node,chip,core\n")
    cores = layout.core_of_node if layout is not None else np.full(len(partition.assignment), -1)
    for i, (c, m) in enumerate(zip(partition.assignment.tolist(), cores.tolist())):
        out.write(f"{i},{c},{m}\n")
    return out.getvalue()


def layout_csv(mesh: Mesh, partition: Partition) -> str:
    out = io.StringIO()
    out.write("node,x,y,chip\n")
    for i, (p, c) in enumerate(zip(mesh.nodes.tolist(), partition.assignment.tolist())):
        out.write(f"{i},{p[0]!r},{p[1]!r},{c}\n")
    return out.getvalue()
