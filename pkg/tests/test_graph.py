import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ddgcn import reference as ref
from ddgcn.exceptions import BoundsError, ConfigError, DimensionError, TopologyError
from ddgcn.graph import (
    H36M_BONES,
    H36M_JOINTS,
    SkeletonTopology,
    apply_transform,
    build_dense_adjacency,
    chain_topology,
    export_subadjacency,
    grid_to_csv,
    h36m_topology,
    init_skeleton_transform,
    reshape_block_matrix,
    subgraph_mask,
    unreshape_block_matrix,
)

D = torch.float64


def test_h36m_skeleton_is_a_tree_with_published_level_sizes():
    topo = h36m_topology()
    assert len(H36M_JOINTS) == 22
    assert len(H36M_BONES) == 21
    assert topo.level_sizes == (22, 11, 2)
    parent, order = topo.parents(0)
    assert sorted(order) == list(range(22))
    assert sum(p == -1 for p in parent) == 1


def test_topology_validation():
    with pytest.raises(TopologyError):
        SkeletonTopology(0)
    with pytest.raises(TopologyError):
        SkeletonTopology(2, ((0, 2),))
    with pytest.raises(TopologyError):
        SkeletonTopology(2, ((1, 1),))
    with pytest.raises(TopologyError):
        SkeletonTopology(3, ((0, 1), (1, 2)), (((0, 1),),))  # joint 2 missing from the partition
    with pytest.raises(TopologyError):
        chain_topology(3).grouping(1)


def test_chain_groupings_are_contiguous():
    topo = chain_topology(8, (4, 2))
    assert topo.grouping(1) == ((0, 1), (2, 3), (4, 5), (6, 7))
    assert topo.grouping(2) == ((0, 1, 2, 3), (4, 5, 6, 7))
    coarse = topo.coarsen(1)
    assert coarse.n_joints == 4 and coarse.bones == ((0, 1), (1, 2), (2, 3))


def test_support_single_joint_two_frames():
    adj = build_dense_adjacency(SkeletonTopology(1), 2)
    assert int(adj.support.sum()) == 4
    assert adj.degree.tolist() == [[2], [2]]


def test_support_one_bone_one_frame():
    adj = build_dense_adjacency(chain_topology(2), 1)
    assert adj.support.all()
    assert adj.shape == (1, 2, 1, 2)


def test_full_h36m_adjacency_shape():
    assert build_dense_adjacency(h36m_topology(), 50).shape == (50, 22, 50, 22)


@pytest.mark.parametrize("t, m", [(1, 1), (2, 3), (3, 5)])
def test_support_symmetry_and_degree_bounds(t, m):
    adj = build_dense_adjacency(chain_topology(m), t)
    s = adj.support
    assert torch.equal(s, s.permute(2, 3, 0, 1))
    assert (adj.degree >= 1).all() and (adj.degree <= t * m).all()


def test_support_counts_against_enumeration():
    topo = h36m_topology()
    t = 3
    adj = build_dense_adjacency(topo, t)
    rel = topo.bone_matrix()
    for i in range(t):
        for j in range(22):
            expected = sum(bool(rel[j, n]) for m in range(t) for n in range(22))
            assert adj.degree[i, j] == expected


def test_init_schemes():
    topo = chain_topology(3)
    mean = build_dense_adjacency(topo, 2, "mean")
    assert torch.equal(mean.weights, mean.support.to(D))
    alpha = mean.normalized()
    assert torch.allclose(alpha.sum((2, 3)), torch.ones(2, 3, dtype=D))
    rown = build_dense_adjacency(topo, 2, "row_normalized")
    assert torch.allclose(rown.weights.sum((2, 3)), torch.ones(2, 3, dtype=D))
    with pytest.raises(ConfigError):
        build_dense_adjacency(topo, 2, "bogus")
    with pytest.raises(ConfigError):
        build_dense_adjacency(topo, 0)
    with pytest.raises(TopologyError):
        build_dense_adjacency(SkeletonTopology(3), 2)


def test_block_matrix_single_frame():
    w = torch.arange(9, dtype=D).reshape(1, 3, 1, 3)
    assert torch.equal(reshape_block_matrix(w), w[0, :, 0, :])


def test_block_matrix_index_map():
    t, m = 2, 2
    w = torch.arange(16, dtype=D).reshape(t, m, t, m)
    mat = reshape_block_matrix(w)
    for i in range(t):
        for j in range(m):
            for a in range(t):
                for n in range(m):
                    assert mat[i * m + j, a * m + n] == w[i, j, a, n]


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_block_matrix_round_trip(t, m, seed):
    w = torch.randn(t, m, t, m, generator=torch.Generator().manual_seed(seed), dtype=D)
    assert torch.equal(unreshape_block_matrix(reshape_block_matrix(w), t, m), w)


def test_unreshape_rejects_wrong_size():
    with pytest.raises(DimensionError):
        unreshape_block_matrix(torch.zeros(5, 5, dtype=D), 2, 2)


def test_masks():
    pose = subgraph_mask("pose", 2, 2).mask
    traj = subgraph_mask("trajectory", 2, 2).mask
    assert int(pose.sum()) == 8 and int(traj.sum()) == 8
    both = pose & traj
    for i, j, a, n in both.nonzero().tolist():
        assert i == a and j == n
    assert int(both.sum()) == 4
    with pytest.raises(ConfigError):
        subgraph_mask("spatial", 2, 2)


def test_transform_example():
    topo = SkeletonTopology(4, ((0, 1), (1, 2), (2, 3)), (((0, 1), (2, 3)),))
    zt = init_skeleton_transform(topo, 1)
    assert zt.z[:, 0].tolist() == [0.5, 0.5, 0, 0]
    assert zt.z[:, 1].tolist() == [0, 0, 0.5, 0.5]
    assert zt.zbar[:, 0].tolist() == [1, 1, 0, 0]
    assert zt.zbar[:, 1].tolist() == [0, 0, 1, 1]


def test_h36m_transform_shapes_and_membership():
    topo = h36m_topology()
    for level, parts in ((1, 11), (2, 2)):
        zt = init_skeleton_transform(topo, level)
        assert tuple(zt.z.shape) == (22, parts)
        rows = (zt.zbar @ zt.z.T).sum(1)
        assert torch.allclose(rows, torch.ones(22, dtype=D))


def test_transform_of_constant_and_mean():
    topo = h36m_topology()
    zt = init_skeleton_transform(topo, 1)
    f = torch.full((3, 22, 2), 4.5, dtype=D)
    assert torch.allclose(apply_transform(zt, f), torch.full((3, 11, 2), 4.5, dtype=D))
    pair = SkeletonTopology(2, ((0, 1),), (((0, 1),),))
    out = apply_transform(init_skeleton_transform(pair, 1), torch.tensor([[[1.0], [3.0]]], dtype=D))
    assert out.item() == 2.0


def test_transform_matches_loop_oracle():
    g = torch.Generator().manual_seed(0)
    z = init_skeleton_transform(h36m_topology(), 1).z + 0.1 * torch.randn(22, 11, generator=g, dtype=D)
    f = torch.randn(4, 22, 3, generator=g, dtype=D)
    fast = apply_transform(z, f).numpy()
    assert np.abs(fast - ref.apply_transform(z.numpy(), f.numpy())).max() < 1e-12
    with pytest.raises(DimensionError):
        apply_transform(z, torch.zeros(4, 21, 3, dtype=D))


def test_export_full_grid_has_default_size():
    adj = build_dense_adjacency(h36m_topology(), 50)
    grid = export_subadjacency(adj)
    assert grid.shape == (1100, 1100)
    assert np.array_equal(grid, reshape_block_matrix(adj).numpy())


def test_export_single_frame_pair_block():
    g = torch.Generator().manual_seed(1)
    w = torch.randn(4, 3, 4, 3, generator=g, dtype=D)
    grid = export_subadjacency(w, frames=(1, 2), joints=(0, 3), col_frames=(3, 4))
    assert np.array_equal(grid, w[1, :, 3, :].numpy())


def test_export_bounds():
    w = torch.zeros(2, 3, 2, 3, dtype=D)
    for kwargs in ({"frames": (0, 3)}, {"joints": (2, 2)}, {"col_joints": (-1, 1)}):
        with pytest.raises(BoundsError):
            export_subadjacency(w, **kwargs)


def test_grid_csv_round_trip():
    grid = np.array([[0.1, -2.5e-300], [1 / 3, 7.0]])
    text = grid_to_csv(grid)
    back = np.array([[float(v) for v in line.split(",")] for line in text.splitlines()])
    assert np.array_equal(back, grid)
