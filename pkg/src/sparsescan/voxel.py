"""Sparse voxel sets: construction from points, box labels, stride-2 downsampling."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc

# foreground margin added to each half-extent, box-local (x, y, z), metres
FG_MARGIN = (0.5, 0.5, 0.25)


@dataclass(frozen=True)
class Grid:
    resolution: tuple[int, int, int]
    cell_size: tuple[float, float, float] = (0.25, 0.25, 0.25)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.resolution) <= 0 or min(self.cell_size) <= 0:
            raise ValueError(f"grid extents must be positive, got {self}")


@dataclass
class VoxelSet:
    coords: np.ndarray                      # (N, 3) int64, x/y/z cell indices
    feats: dc.Tensor                        # (N, D)
    grid: Grid

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.feats = dc.tensor(self.feats)
        if self.feats.shape[0] != len(self.coords):
            raise ValueError(f"{len(self.coords)} coords but {self.feats.shape[0]} feature rows")

    def __len__(self):
        return len(self.coords)

    @property
    def resolution(self):
        return self.grid.resolution

    def centers(self) -> np.ndarray:
        """World-space centre of every voxel."""
        return np.asarray(self.grid.origin) + (self.coords + 0.5) * np.asarray(self.grid.cell_size)

    def with_feats(self, feats) -> "VoxelSet":
        return replace(self, feats=feats)

    def subset(self, index) -> "VoxelSet":
        index = np.asarray(index, dtype=np.int64)
        return VoxelSet(self.coords[index], dc.gather(self.feats, index), self.grid)

    def validate(self):
        res = np.asarray(self.grid.resolution)
        if len(self) and ((self.coords < 0) | (self.coords >= res)).any():
            raise ValueError("voxel coordinates outside the grid")
        if len(np.unique(self.coords, axis=0)) != len(self):
            raise ValueError("duplicate voxel coordinates")


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    class_id: int = 1

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError(f"box sizes must be positive, got {self.size}")

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def corners_bev(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        hx, hy = self.size[0] / 2, self.size[1] / 2
        local = np.array([[hx, hy], [hx, -hy], [-hx, -hy], [-hx, hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center[:2])


def voxelize(points, grid: Grid) -> VoxelSet:
    """One voxel per occupied cell: mean point features plus normalized count.

    ``points`` is ``(P, 3 + k)``: xyz followed by k feature columns.  The count
    column is divided by the largest count in the scene.  Points outside the
    grid are dropped.
    """
    points = np.asarray(points, dtype=np.float64)
    k = points.shape[1] - 3 if points.ndim == 2 and points.shape[1] >= 3 else 0
    points = points.reshape(-1, 3 + k)
    cells = np.floor((points[:, :3] - np.asarray(grid.origin)) / np.asarray(grid.cell_size)).astype(np.int64)
    inside = ((cells >= 0) & (cells < np.asarray(grid.resolution))).all(axis=1)
    cells, points = cells[inside], points[inside]
    if len(cells) == 0:
        return VoxelSet(np.zeros((0, 3), np.int64), np.zeros((0, k + 1)), grid)
    coords, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(coords), k))
    np.add.at(sums, inverse, points[:, 3:])
    feats = np.concatenate([sums / counts[:, None], (counts / counts.max())[:, None]], axis=1)
    return VoxelSet(coords, feats, grid)


def _box_frame(centers: np.ndarray, box: Box3D) -> np.ndarray:
    d = centers - np.asarray(box.center)
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)


def inside_enlarged(points: np.ndarray, box: Box3D, margin=FG_MARGIN, frame: str = "box") -> np.ndarray:
    """Membership in ``box`` grown by ``margin`` per half-extent.

    ``frame="box"`` grows along the box's own axes; ``frame="world"`` grows
    along world X/Y (Minkowski sum with an axis-aligned rectangle).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    local = _box_frame(points, box)
    half = np.asarray(box.size) / 2
    in_z = np.abs(local[:, 2]) <= half[2] + margin[2]
    if frame == "box":
        return in_z & (np.abs(local[:, 0]) <= half[0] + margin[0]) & (np.abs(local[:, 1]) <= half[1] + margin[1])
    if frame != "world":
        raise ValueError(f"unknown margin frame {frame!r}")
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    d = points[:, :2] - np.asarray(box.center[:2])
    ok = in_z
    # separating axes of the Minkowski sum: the box's normals and the world axes
    for n in (np.array([c, s]), np.array([-s, c]), np.array([1.0, 0.0]), np.array([0.0, 1.0])):
        reach = abs(n @ [c, s]) * half[0] + abs(n @ [-s, c]) * half[1]
        reach += abs(n[0]) * margin[0] + abs(n[1]) * margin[1]
        ok = ok & (np.abs(d @ n) <= reach + 1e-12)
    return ok


def foreground_labels(vox: VoxelSet, boxes, frame: str = "box") -> np.ndarray:
    """1 where the voxel centre lies inside any enlarged box, else 0."""
    centers = vox.centers()
    label = np.zeros(len(vox), dtype=np.int64)
    for box in boxes:
        label |= inside_enlarged(centers, box, frame=frame)
    return label


def semantic_labels(vox: VoxelSet, boxes, frame: str = "box") -> np.ndarray:
    """Class of the smallest enlarged box containing each voxel centre (0 = none)."""
    centers = vox.centers()
    label = np.zeros(len(vox), dtype=np.int64)
    best = np.full(len(vox), np.inf)
    for box in boxes:
        hit = inside_enlarged(centers, box, frame=frame) & (box.volume < best)
        label[hit] = box.class_id
        best[hit] = box.volume
    return label


def downsample(vox: VoxelSet, weight=None, bias=None, stride: int = 2) -> tuple[VoxelSet, np.ndarray]:
    """Merge voxels by integer division of coordinates.

    Each output feature is ``mean(children) @ weight + bias`` (the linear map is
    skipped when ``weight`` is None).  Returns the new set and, for every input
    voxel, the row of its parent.
    """
    res = np.asarray(vox.grid.resolution)
    padded = -(-res // stride) * stride
    grid = Grid(tuple(int(v) for v in padded // stride),
                tuple(float(c) * stride for c in vox.grid.cell_size), vox.grid.origin)
    if len(vox) == 0:
        width = weight.shape[1] if weight is not None else vox.feats.shape[1]
        return VoxelSet(np.zeros((0, 3), np.int64), np.zeros((0, width)), grid), np.zeros(0, np.int64)
    coords, parent, counts = np.unique(vox.coords // stride, axis=0, return_inverse=True, return_counts=True)
    parent = parent.reshape(-1)
    summed = dc.scatter(vox.feats, parent, len(coords))
    inv = np.broadcast_to((1.0 / counts)[:, None], summed.shape)
    feats = summed * inv
    if weight is not None:
        feats = feats @ weight
    if bias is not None:
        feats = feats + dc.broadcast_to(dc.reshape(bias, (1, bias.shape[0])), feats.shape)
    return VoxelSet(coords, feats, grid), parent


def neighbor_table(coords, offsets, group=None, valid=None) -> np.ndarray:
    """Row index of the voxel at ``coord + offset`` for every offset, -1 if empty.

    With ``group`` given, only voxels sharing the same group id are neighbours.
    Rows with ``valid`` False neither find nor are found.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, 3)
    n = len(coords)
    table = np.full((n, len(offsets)), -1, dtype=np.int64)
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        return table
    group = np.zeros(n, dtype=np.int64) if group is None else np.asarray(group, dtype=np.int64)
    pad = int(np.abs(offsets).max()) if len(offsets) else 0
    lo = coords[valid].min(axis=0) - pad
    span = coords[valid].max(axis=0) + pad - lo + 1

    def key(c, g):
        c = c - lo
        return ((g * span[0] + c[:, 0]) * span[1] + c[:, 1]) * span[2] + c[:, 2]

    rows = np.nonzero(valid)[0]
    keys = key(coords[rows], group[rows])
    order = np.argsort(keys, kind="stable")
    sorted_keys, sorted_rows = keys[order], rows[order]
    for t, off in enumerate(offsets):
        probe = key(coords[rows] + off, group[rows])
        pos = np.clip(np.searchsorted(sorted_keys, probe), 0, len(sorted_keys) - 1)
        hit = sorted_keys[pos] == probe
        table[rows[hit], t] = sorted_rows[pos[hit]]
    return table


SIX_NEIGHBORS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


def neighbor_mean(vox: VoxelSet, feats=None) -> dc.Tensor:
    """Mean feature over the occupied 6-neighbourhood (zero when isolated)."""
    feats = vox.feats if feats is None else feats
    table = neighbor_table(vox.coords, SIX_NEIGHBORS)
    counts = np.maximum((table >= 0).sum(axis=1), 1).astype(np.float64)
    w = np.ones((6,) + tuple(feats.shape[1:]))
    summed = dc.index_conv(feats, w, table)
    return summed * np.broadcast_to((1.0 / counts)[:, None], summed.shape)
