import math

import numpy as np
import pytest

from sparsescan import diffcore as dc
from sparsescan.voxel import (Box3D, Grid, VoxelSet, downsample, foreground_labels, neighbor_mean,
                             semantic_labels, voxelize)


def test_voxelize_means_and_normalized_count():
    grid = Grid((4, 4, 4), (1.0, 1.0, 1.0))
    vox = voxelize([[0.1, 0.1, 0.1, 1.0], [0.9, 0.2, 0.3, 3.0]], grid)
    assert len(vox) == 1
    np.testing.assert_allclose(vox.feats.data, [[2.0, 1.0]])


def test_voxelize_origin_point():
    vox = voxelize([[0.0, 0.0, 0.0, 1.0]], Grid((4, 4, 4), (0.5, 0.5, 0.5)))
    np.testing.assert_array_equal(vox.coords, [[0, 0, 0]])


def test_voxelize_bounds_and_dropping():
    rng = np.random.default_rng(0)
    grid = Grid((10, 10, 4), (1.0, 1.0, 1.0))
    pts = np.concatenate([rng.uniform(0, 1, (1000, 3)) * [10, 10, 4], rng.random((1000, 1))], 1)
    vox = voxelize(pts, grid)
    assert len(vox) <= 400
    vox.validate()
    outside = voxelize([[-1.0, 0.0, 0.0, 1.0], [10.5, 0.0, 0.0, 1.0]], grid)
    assert len(outside) == 0 and outside.feats.shape == (0, 2)


def test_voxelize_permutation_invariant():
    rng = np.random.default_rng(1)
    grid = Grid((6, 6, 6), (1.0, 1.0, 1.0))
    pts = np.concatenate([rng.uniform(0, 6, (200, 3)), rng.random((200, 2))], 1)
    a, b = voxelize(pts, grid), voxelize(pts[rng.permutation(200)], grid)
    np.testing.assert_array_equal(a.coords, b.coords)
    np.testing.assert_allclose(a.feats.data, b.feats.data, atol=1e-12)


def test_foreground_margin_along_x():
    box = Box3D((4.0, 4.0, 1.0), (2.0, 2.0, 2.0))
    centers = np.array([[4.0, 4.0, 1.0], [5.4, 4.0, 1.0], [5.6, 4.0, 1.0]])
    vox = VoxelSet(np.zeros((3, 3), int), np.zeros((3, 1)), Grid((8, 8, 8)))
    vox.centers = lambda: centers
    np.testing.assert_array_equal(foreground_labels(vox, [box]), [1, 1, 0])


def test_margin_follows_box_axes():
    # 0.4 m beyond the rotated box's local +X face is inside, 0.6 m is out
    yaw = math.pi / 4
    box = Box3D((0.0, 0.0, 0.0), (2.0, 1.0, 1.0), yaw)
    d = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    vox = VoxelSet(np.zeros((2, 3), int), np.zeros((2, 1)), Grid((8, 8, 8)))
    vox.centers = lambda: np.stack([1.4 * d, 1.6 * d])
    np.testing.assert_array_equal(foreground_labels(vox, [box]), [1, 0])


def test_semantic_labels_smallest_box_wins():
    small = Box3D((4.0, 4.0, 1.0), (1.0, 1.0, 1.0), class_id=1)
    large = Box3D((4.0, 4.0, 1.0), (4.0, 4.0, 2.0), class_id=3)
    lone = Box3D((20.0, 20.0, 1.0), (1.0, 1.0, 1.0), class_id=2)
    vox = VoxelSet(np.zeros((3, 3), int), np.zeros((3, 1)), Grid((8, 8, 8)))
    vox.centers = lambda: np.array([[4.0, 4.0, 1.0], [20.0, 20.0, 1.0], [-9.0, -9.0, 0.0]])
    np.testing.assert_array_equal(semantic_labels(vox, [large, small, lone]), [1, 2, 0])


def test_labels_match_analytic_membership_at_zero_yaw():
    rng = np.random.default_rng(2)
    grid = Grid((16, 16, 8), (0.5, 0.5, 0.5))
    box = Box3D((4.0, 4.0, 2.0), (3.0, 2.0, 1.5))
    coords = np.stack(np.unravel_index(rng.choice(16 * 16 * 8, 300, replace=False), (16, 16, 8)), 1)
    vox = VoxelSet(coords, np.zeros((300, 1)), grid)
    c = vox.centers()
    expected = ((np.abs(c[:, 0] - 4.0) <= 2.0) & (np.abs(c[:, 1] - 4.0) <= 1.5)
                & (np.abs(c[:, 2] - 2.0) <= 1.0)).astype(int)
    np.testing.assert_array_equal(foreground_labels(vox, [box]), expected)


def test_world_frame_flag_grows_along_world_axes():
    box = Box3D((0.0, 0.0, 0.0), (2.0, 2.0, 1.0), math.pi / 4)
    vox = VoxelSet(np.zeros((1, 3), int), np.zeros((1, 1)), Grid((8, 8, 8)))
    # 1.6 m along the box's +X normal: the box-frame margin stops at 1.5 m,
    # the world-axis margin reaches 1 + 1/sqrt(2) m in this direction
    vox.centers = lambda: np.array([[1.6 / math.sqrt(2.0), 1.6 / math.sqrt(2.0), 0.0]])
    assert foreground_labels(vox, [box], frame="world")[0] == 1
    assert foreground_labels(vox, [box], frame="box")[0] == 0


def test_box_sizes_must_be_positive():
    with pytest.raises(ValueError):
        Box3D((0, 0, 0), (1.0, 0.0, 1.0))


def test_downsample_merges_block_and_means():
    vox = VoxelSet([[0, 0, 0], [1, 1, 1]], np.zeros((2, 1)), Grid((4, 4, 4)))
    out, parent = downsample(vox)
    np.testing.assert_array_equal(out.coords, [[0, 0, 0]])
    np.testing.assert_array_equal(parent, [0, 0])
    vox = VoxelSet([[0, 0, 0], [1, 0, 0]], [[2.0], [4.0]], Grid((4, 4, 4)))
    out, _ = downsample(vox, dc.tensor(np.eye(1)))
    np.testing.assert_allclose(out.feats.data, [[3.0]])


def test_downsample_distinct_blocks_and_resolution():
    coords = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 2], [6, 4, 2]])
    out, _ = downsample(VoxelSet(coords, np.ones((4, 2)), Grid((7, 8, 5))))
    assert len(out) == 4
    assert out.resolution == (4, 4, 3)
    twice, _ = downsample(downsample(VoxelSet(coords, np.ones((4, 2)), Grid((16, 8, 4))))[0])
    assert twice.resolution == (4, 2, 1)


def test_neighbor_mean_of_isolated_voxel_is_zero():
    vox = VoxelSet([[0, 0, 0], [1, 0, 0], [5, 5, 5]], [[1.0], [3.0], [7.0]], Grid((8, 8, 8)))
    np.testing.assert_allclose(neighbor_mean(vox).data, [[3.0], [1.0], [0.0]])


def test_voxelset_rejects_duplicates_and_out_of_grid():
    with pytest.raises(ValueError):
        VoxelSet([[0, 0, 0], [0, 0, 0]], np.zeros((2, 1)), Grid((2, 2, 2))).validate()
    with pytest.raises(ValueError):
        VoxelSet([[2, 0, 0]], np.zeros((1, 1)), Grid((2, 2, 2))).validate()
