"""Labeled point clouds and their voxel-grid measurement.

Clouds are (N, 3) float coordinates in meters plus integer class labels.
Voxel grids are dense occupancy fields over a regular lattice; axis order is
(z, y, x) with z vertical, everywhere in this package.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

BINARY_MAGIC = b"GPC1"

# Per-vertex colors for prediction-vs-truth PLY exports.
COLOR_TP = (0, 200, 0)
COLOR_FP = (220, 0, 0)
COLOR_FN = (240, 160, 0)
COLOR_TN = (150, 150, 150)


class FormatError(ValueError):
    """A point-cloud file does not parse under its declared format."""


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64, xyz in meters
    labels: np.ndarray  # (N,) non-negative int

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError(
                f"points ({len(self.points)}) and labels ({len(self.labels)}) differ in length"
            )
        if len(self.points) and not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class VoxelGrid:
    """Dense scalar field over a (D_z, D_y, D_x) lattice."""

    values: np.ndarray          # (D_z, D_y, D_x)
    origin: np.ndarray          # world xyz of the grid corner, meters
    voxel_size: np.ndarray      # edge length per world axis (x, y, z), meters

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.voxel_size = np.asarray(self.voxel_size, dtype=np.float64).reshape(3)
        if self.values.ndim != 3:
            raise ValueError("grid values must be a 3-d array")
        if not (self.voxel_size > 0).all():
            raise ValueError("voxel_size must be positive on every axis")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]


@dataclass
class VoxelPointMap:
    """Which voxel each point of the source cloud fell into."""

    point_voxels: np.ndarray    # (N, 3) int indices as (iz, iy, ix)
    shape: tuple[int, int, int]

    def points_in_voxel(self, index: tuple[int, int, int]) -> np.ndarray:
        mask = (self.point_voxels == np.asarray(index)).all(axis=1)
        return np.flatnonzero(mask)


def load_pointcloud(path: str | os.PathLike, format: str = "text") -> PointCloud:
    """Read a labeled cloud from disk.

    Text format: one `x y z label` record per line, '#' starts a comment.
    Binary format: magic ``GPC1`` then little-endian float32[3] + uint8 records.
    """
    if format == "text":
        return _load_text(path)
    if format == "binary":
        return _load_binary(path)
    raise FormatError(f"unknown point cloud format {format!r}")


def save_pointcloud(cloud: PointCloud, path: str | os.PathLike, format: str = "text") -> None:
    if format == "text":
        with open(path, "w") as fh:
            for (x, y, z), lab in zip(cloud.points, cloud.labels):
                fh.write(f"{x:.6f} {y:.6f} {z:.6f} {lab}\n")
    elif format == "binary":
        rec = np.empty(len(cloud), dtype=_binary_dtype())
        rec["xyz"] = cloud.points.astype("<f4")
        rec["label"] = cloud.labels.astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(rec.tobytes())
    else:
        raise FormatError(f"unknown point cloud format {format!r}")


def _binary_dtype() -> np.dtype:
    return np.dtype([("xyz", "<f4", 3), ("label", "u1")])


def _load_text(path: str | os.PathLike) -> PointCloud:
    points: list[tuple[float, float, float]] = []
    labels: list[int] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            fields = body.split()
            if len(fields) != 4:
                raise FormatError(f"{path}:{lineno}: expected 'x y z label', got {line.strip()!r}")
            try:
                x, y, z = (float(v) for v in fields[:3])
                lab = int(fields[3])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if not (np.isfinite(x) and np.isfinite(y) and np.isfinite(z)):
                raise FormatError(f"{path}:{lineno}: non-finite coordinate")
            if lab < 0:
                raise FormatError(f"{path}:{lineno}: negative label {lab}")
            points.append((x, y, z))
            labels.append(lab)
    return PointCloud(np.array(points, dtype=np.float64).reshape(-1, 3), np.array(labels, dtype=np.int64))


def _load_binary(path: str | os.PathLike) -> PointCloud:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != BINARY_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {BINARY_MAGIC!r}")
        payload = fh.read()
    dtype = _binary_dtype()
    if len(payload) % dtype.itemsize:
        raise FormatError(f"{path}: truncated record at offset {4 + len(payload)}")
    rec = np.frombuffer(payload, dtype=dtype)
    points = rec["xyz"].astype(np.float64)
    if len(points) and not np.isfinite(points).all():
        raise FormatError(f"{path}: non-finite coordinate")
    return PointCloud(points, rec["label"].astype(np.int64))


def crop_around(cloud: PointCloud, center: tuple[float, float, float], radius: float) -> PointCloud:
    """Keep points whose horizontal (xy) distance to center is <= radius."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    d2 = (cloud.points[:, 0] - center[0]) ** 2 + (cloud.points[:, 1] - center[1]) ** 2
    keep = d2 <= radius * radius
    return PointCloud(cloud.points[keep], cloud.labels[keep])


def voxelize(
    cloud: PointCloud,
    shape: tuple[int, int, int],
    target_label: int = 1,
) -> tuple[VoxelGrid, VoxelGrid, VoxelPointMap]:
    """Discretize a cloud onto a (D_z, D_y, D_x) occupancy grid.

    The grid covers the cloud's bounding box expanded by half a voxel per
    side, so boundary points fall strictly inside cells. Occupancy is 1 iff a
    voxel contains at least one point; the label grid is 1 iff it contains at
    least one point of ``target_label``.

    Returns (occupancy grid, label grid, point-to-voxel map).
    """
    if len(cloud) == 0:
        raise ValueError("cannot voxelize an empty cloud")
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ValueError(f"invalid grid shape {shape}")

    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    extent = hi - lo
    shape_xyz = np.array([shape[2], shape[1], shape[0]], dtype=np.int64)

    voxel_size = np.empty(3)
    for axis in range(3):
        if extent[axis] == 0.0:
            voxel_size[axis] = 1.0  # planar cloud: one-voxel slab on this axis
        elif shape_xyz[axis] == 1:
            voxel_size[axis] = 2.0 * extent[axis]
        else:
            voxel_size[axis] = extent[axis] / (shape_xyz[axis] - 1)
    origin = lo - voxel_size / 2.0

    idx_xyz = np.floor((cloud.points - origin) / voxel_size).astype(np.int64)
    np.clip(idx_xyz, 0, shape_xyz - 1, out=idx_xyz)
    idx_zyx = idx_xyz[:, ::-1]

    occupancy = np.zeros(shape, dtype=np.uint8)
    occupancy[idx_zyx[:, 0], idx_zyx[:, 1], idx_zyx[:, 2]] = 1
    labels = np.zeros(shape, dtype=np.uint8)
    is_target = cloud.labels == target_label
    tz = idx_zyx[is_target]
    labels[tz[:, 0], tz[:, 1], tz[:, 2]] = 1

    grid = VoxelGrid(occupancy, origin, voxel_size)
    label_grid = VoxelGrid(labels, origin, voxel_size)
    return grid, label_grid, VoxelPointMap(idx_zyx, shape)


def devoxelize(mask: np.ndarray, vmap: VoxelPointMap) -> np.ndarray:
    """Per-point predictions: every point inherits its voxel's mask value."""
    mask = np.asarray(mask)
    if mask.shape != vmap.shape:
        raise ValueError(f"mask shape {mask.shape} != map shape {vmap.shape}")
    iz, iy, ix = vmap.point_voxels.T
    return mask[iz, iy, ix]


def save_colored_cloud(
    cloud: PointCloud,
    predictions: np.ndarray,
    truth: np.ndarray,
    path: str | os.PathLike,
) -> None:
    """Write an ASCII PLY coloring each vertex by its TP/FP/FN/TN outcome."""
    predictions = np.asarray(predictions).astype(bool).reshape(-1)
    truth = np.asarray(truth).astype(bool).reshape(-1)
    if len(predictions) != len(cloud) or len(truth) != len(cloud):
        raise ValueError("predictions/truth length must match the cloud")

    palette = np.array([COLOR_TN, COLOR_FN, COLOR_FP, COLOR_TP], dtype=np.uint8)
    colors = palette[2 * predictions.astype(int) + truth.astype(int)]

    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for (x, y, z), (r, g, b) in zip(cloud.points, colors):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n")
