import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neurofem.fem import poisson_disk_system
from neurofem.mesh import CapacityError, gen_disk_mesh
from neurofem.network import SnnParams, build_network
from neurofem.partition import (
    Partition,
    assign_cores,
    layout_csv,
    partition_csv,
    partition_mesh,
    partition_metrics,
)


def single_chip(n):
    return Partition(np.zeros(n, dtype=np.int64), np.zeros((1, 2)), 1, 1)


def test_one_chip():
    m = gen_disk_mesh(0.01)
    p = partition_mesh(m, 1)
    assert not p.assignment.any()
    np.testing.assert_allclose(p.chip_positions[0], m.nodes.mean(axis=0), atol=1e-12)


def test_two_clusters():
    rng = np.random.default_rng(0)
    pts = np.concatenate([rng.random((50, 2)), rng.random((50, 2)) + 100.0])
    for seed in range(5):
        p = partition_mesh(pts, 2, seed=seed)
        assert len(set(p.assignment[:50])) == 1 and len(set(p.assignment[50:])) == 1
        assert p.assignment[0] != p.assignment[50]


def test_chip_count_validation():
    pts = np.zeros((3, 2))
    with pytest.raises(ValueError):
        partition_mesh(pts, 0)
    with pytest.raises(ValueError):
        partition_mesh(pts, 4)


@given(st.integers(1, 40), st.integers(0, 1000), st.integers(1, 200))
def test_never_empty_and_deterministic(k, seed, n):
    k = min(k, n)
    pts = np.random.default_rng(seed).random((n, 2)) ** 3  # clustered
    p = partition_mesh(pts, k, iterations=4, seed=seed)
    assert p.loads.min() >= 1 and p.loads.sum() == n
    q = partition_mesh(pts, k, iterations=4, seed=seed)
    np.testing.assert_array_equal(p.assignment, q.assignment)


def test_cores_256_nodes():
    lay = assign_cores(single_chip(256), npm=8)
    assert np.all(np.bincount(lay.core_of_node, minlength=128) == 2)
    assert np.all(lay.neurons_per_core == 16)


def test_cores_130_nodes():
    lay = assign_cores(single_chip(130), npm=8)
    per = np.bincount(lay.core_of_node, minlength=128)
    assert per[:2].tolist() == [2, 2] and np.all(per[2:] == 1)
    assert lay.core_pairs().shape == (130, 2)


def test_core_capacity():
    with pytest.raises(CapacityError, match="chip 0"):
        assign_cores(single_chip(4097), npm=16)
    assert assign_cores(single_chip(4096), npm=16).neurons_per_core.max() == 512


def test_edge_cut_extremes():
    s = poisson_disk_system(0.02)
    n = s.mesh.n_nodes
    cut, std, ratio = partition_metrics(single_chip(n), s)
    assert cut == 0 and std == 0 and ratio == 1
    own = Partition(np.arange(n), np.zeros((n, 2)), n, 1)
    off = int(np.count_nonzero(s.A.row_indices() != s.A.col_idx))
    assert partition_metrics(own, s)[0] == off
    assert partition_metrics(own, build_network(s, SnnParams(npm=2)))[0] == off
    with pytest.raises(ValueError):
        partition_metrics(single_chip(5), s)


def test_edge_cut_improves_with_iterations():
    s = poisson_disk_system(0.002)
    cuts = {it: np.mean([partition_metrics(partition_mesh(s.mesh, 16, it, seed=k), s)[0] for k in range(4)])
            for it in (1, 16)}
    assert cuts[16] < cuts[1]


def test_csv_outputs():
    m = gen_disk_mesh(0.05)
    p = partition_mesh(m, 4)
    lay = assign_cores(p, 8)
    lines = partition_csv(p, lay).splitlines()
    assert lines[0] == "node,chip,core" and len(lines) == m.n_nodes + 1
    assert layout_csv(m, p).splitlines()[0] == "node,x,y,chip"
