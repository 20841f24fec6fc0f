"""
Geometry Module
This module converts depth images and camera poses into geocentric voxel evidence
for the semantic map updates.

Conventions: the camera frame is +X right, +Y up, +Z forward. The world frame is
right-handed with Z as height; a pose with zero yaw looks along world +Y and positive
yaw turns left (counterclockwise seen from above).
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from config import HYPERPARAMETERS, NUM_CLASSES, InputError, RoomShuffleError

logger = logging.getLogger(__name__)

EGOCENTRIC = 'egocentric'
GEOCENTRIC = 'geocentric'

# Camera axes expressed in world axes for a level, zero-yaw pose
_CAMERA_TO_WORLD_AXES = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 0.0],
])


class ContractError(RoomShuffleError):
    """Raised when a point cloud is used in the wrong reference frame."""


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_length_px: float
    principal_point: Tuple[float, float]
    width: int
    height: int

    def __post_init__(self):
        if self.focal_length_px <= 0:
            raise InputError(f"focal length must be positive, got {self.focal_length_px}")
        if self.width < 1 or self.height < 1:
            raise InputError(f"image size must be positive, got {self.width}x{self.height}")
        cx, cy = self.principal_point
        if not (0 <= cx <= self.width - 1 and 0 <= cy <= self.height - 1):
            raise InputError(f"principal point {self.principal_point} outside the image")

    @classmethod
    def centered(cls, width: int, height: int, focal_length_px: float) -> 'CameraIntrinsics':
        """Intrinsics with the principal point at the image center."""
        return cls(float(focal_length_px), ((width - 1) / 2.0, (height - 1) / 2.0), int(width), int(height))


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    yaw: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'position', np.asarray(self.position, dtype=np.float64).reshape(3))
        if not -math.pi / 2 - 1e-12 <= self.pitch <= math.pi / 2 + 1e-12:
            raise InputError(f"pitch {self.pitch} outside [-pi/2, pi/2]")
        object.__setattr__(self, 'yaw', float(self.yaw) % (2.0 * math.pi))


@dataclass(frozen=True)
class GridSpec:
    dims: Tuple[int, int, int]
    voxel_size: float
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise InputError(f"grid dims must be three positive integers, got {self.dims}")
        if self.voxel_size <= 0:
            raise InputError(f"voxel size must be positive, got {self.voxel_size}")
        if self.num_classes < 1:
            raise InputError(f"num_classes must be positive, got {self.num_classes}")
        object.__setattr__(self, 'dims', dims)
        object.__setattr__(self, 'voxel_size', float(self.voxel_size))
        object.__setattr__(self, 'origin', tuple(float(o) for o in self.origin))

    @classmethod
    def for_room(cls, room_size: float, voxel_size: Optional[float] = None,
                 map_height: Optional[float] = None, num_classes: int = NUM_CLASSES) -> 'GridSpec':
        """
        Grid covering a square room from the floor up to the mapped height.

        The grid starts half a voxel below the floor so the floor plane and the tops of
        boxes with extents in whole voxel pairs cut through voxel centers.
        """
        voxel_size = voxel_size or HYPERPARAMETERS['voxel_size']
        map_height = map_height or HYPERPARAMETERS['map_height']
        side = int(round(room_size / voxel_size))
        depth = int(round(map_height / voxel_size))
        return cls((side, side, depth), voxel_size, (0.0, 0.0, -voxel_size / 2.0), num_classes)

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.dims + (self.num_classes,)

    @property
    def num_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def voxel_centers(self, flat_indices: np.ndarray) -> np.ndarray:
        """World coordinates of the centers of the given flat voxel indices."""
        ijk = np.stack(np.unravel_index(np.asarray(flat_indices, dtype=np.int64), self.dims), axis=-1)
        return np.asarray(self.origin) + (ijk + 0.5) * self.voxel_size

    def column_centers(self) -> np.ndarray:
        """(H, W, 2) world xy of every ground-plane column center."""
        xs = self.origin[0] + (np.arange(self.dims[0]) + 0.5) * self.voxel_size
        ys = self.origin[1] + (np.arange(self.dims[1]) + 0.5) * self.voxel_size
        gx, gy = np.meshgrid(xs, ys, indexing='ij')
        return np.stack([gx, gy], axis=-1)

    def voxel_index(self, points: np.ndarray) -> np.ndarray:
        """Integer (N, 3) voxel indices of world points; may lie outside the grid."""
        return np.floor((np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / self.voxel_size).astype(np.int64)


@dataclass
class PointCloud:
    points: np.ndarray
    probs: np.ndarray
    frame: str = EGOCENTRIC
    attributes: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass
class VoxelEvidence:
    """
    Sparse voxel evidence: the occupied voxels and their averaged class vectors.

    The dense views `probs` and `mask` are materialized on demand; a voxel outside
    `indices` has mask 0 and the zero probability vector.
    """
    grid: GridSpec
    indices: np.ndarray
    values: np.ndarray
    attributes: Optional[np.ndarray] = None
    dropped: int = 0

    @property
    def mask(self) -> np.ndarray:
        mask = np.zeros(self.grid.num_voxels, dtype=bool)
        mask[self.indices] = True
        return mask.reshape(self.grid.dims)

    @property
    def probs(self) -> np.ndarray:
        dense = np.zeros((self.grid.num_voxels, self.values.shape[1]), dtype=self.values.dtype)
        dense[self.indices] = self.values
        return dense.reshape(self.grid.dims + (self.values.shape[1],))

    @classmethod
    def from_dense(cls, grid: GridSpec, probs: np.ndarray, mask: np.ndarray,
                   attributes: Optional[np.ndarray] = None) -> 'VoxelEvidence':
        if probs.shape[:3] != grid.dims or mask.shape != grid.dims:
            raise InputError(f"evidence shape {probs.shape} / {mask.shape} does not match grid {grid.dims}")
        flat_probs = probs.reshape(-1, probs.shape[-1])
        flat_mask = mask.reshape(-1).astype(bool)
        if np.any(flat_probs[~flat_mask] != 0):
            raise InputError("evidence has probability mass on unmasked voxels")
        indices = np.flatnonzero(flat_mask)
        attrs = None
        if attributes is not None:
            attrs = attributes.reshape(-1, attributes.shape[-1])[indices]
        return cls(grid, indices, flat_probs[indices], attrs)


def pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) camera-frame ray directions with unit forward component."""
    v, u = np.mgrid[0:intr.height, 0:intr.width].astype(np.float64)
    cx, cy = intr.principal_point
    f = intr.focal_length_px
    # Image rows grow downward, camera +Y points up
    return np.stack([(u - cx) / f, -(v - cy) / f, np.ones_like(u)], axis=-1)


def camera_to_world_rotation(pose: Pose) -> np.ndarray:
    """Rotation taking camera-frame vectors to world-frame vectors: pitch, axis fix, then yaw."""
    cp, sp = math.cos(pose.pitch), math.sin(pose.pitch)
    cy, sy = math.cos(pose.yaw), math.sin(pose.yaw)
    pitch_rot = np.array([[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]])
    yaw_rot = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    return yaw_rot @ _CAMERA_TO_WORLD_AXES @ pitch_rot


def depth_to_pointcloud(depth: np.ndarray, seg, intr: CameraIntrinsics,
                        max_range: Optional[float] = None,
                        attributes: Optional[np.ndarray] = None,
                        depth_noise_std: float = 0.0,
                        rng: Optional[np.random.Generator] = None) -> PointCloud:
    """
    Back-project a depth image into an egocentric point cloud.

    Args:
        depth: (H, W) depth along the optical axis in meters
        seg: SegmentationFrame or a raw (H, W, C) class-probability image
        intr: Camera intrinsics matching the image size
        max_range: Depths beyond this are invalid (default 10 m)
        attributes: Optional (H, W, A) per-pixel values carried with each point
        depth_noise_std: Standard deviation of additive Gaussian depth noise; 0 disables it
        rng: Random generator used when depth noise is enabled

    Returns:
        PointCloud with one point per valid pixel, in row-major pixel order
    """
    probs = getattr(seg, 'probs', seg)
    expected = (intr.height, intr.width)
    if depth.shape != expected or probs.shape[:2] != expected:
        raise InputError(f"depth {depth.shape} and segmentation {probs.shape[:2]} must both be {expected}")
    if attributes is not None and attributes.shape[:2] != expected:
        raise InputError(f"attributes {attributes.shape[:2]} must be {expected}")
    max_range = HYPERPARAMETERS['max_depth'] if max_range is None else max_range

    depth = np.asarray(depth, dtype=np.float64)
    if depth_noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        depth = depth + rng.normal(0.0, depth_noise_std, size=depth.shape)

    with np.errstate(invalid='ignore'):
        valid = np.isfinite(depth) & (depth > 0) & (depth <= max_range)
    v, u = np.nonzero(valid)
    d = depth[v, u]
    cx, cy = intr.principal_point
    f = intr.focal_length_px
    points = np.stack([(u - cx) * d / f, -(v - cy) * d / f, d], axis=-1)

    attrs = attributes[v, u] if attributes is not None else None
    return PointCloud(points, probs[v, u], EGOCENTRIC, attrs)


def transform_to_world(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Rigidly move an egocentric cloud into the world frame."""
    if cloud.frame != EGOCENTRIC:
        raise ContractError(f"transform_to_world expects an egocentric cloud, got {cloud.frame}")
    rotation = camera_to_world_rotation(pose)
    points = cloud.points @ rotation.T + pose.position
    return PointCloud(points, cloud.probs, GEOCENTRIC, cloud.attributes)


def voxelize(cloud: PointCloud, grid: GridSpec) -> VoxelEvidence:
    """
    Bin a geocentric cloud into voxels, averaging the class vectors of points that share one.

    Points falling outside the grid are dropped; their count is kept in `dropped`.
    """
    if cloud.frame != GEOCENTRIC:
        raise ContractError(f"voxelize expects a geocentric cloud, got {cloud.frame}")
    num_classes = cloud.probs.shape[1] if cloud.probs.ndim == 2 else grid.num_classes
    if len(cloud) == 0:
        attrs = None if cloud.attributes is None else np.zeros((0, cloud.attributes.shape[-1]))
        return VoxelEvidence(grid, np.zeros(0, dtype=np.int64), np.zeros((0, num_classes)), attrs, 0)

    idx = grid.voxel_index(cloud.points)
    inside = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
    dropped = int(len(cloud) - inside.sum())
    if dropped:
        logger.debug("voxelize dropped %d of %d points outside the grid", dropped, len(cloud))

    flat = np.ravel_multi_index(idx[inside].T, grid.dims)
    indices, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)

    sums = np.zeros((len(indices), num_classes))
    np.add.at(sums, inverse, cloud.probs[inside])
    values = sums / counts[:, None]

    attrs = None
    if cloud.attributes is not None:
        attr_sums = np.zeros((len(indices), cloud.attributes.shape[-1]))
        np.add.at(attr_sums, inverse, cloud.attributes[inside])
        attrs = attr_sums / counts[:, None]
    return VoxelEvidence(grid, indices.astype(np.int64), values, attrs, dropped)


def observation_to_evidence(depth: np.ndarray, seg, intr: CameraIntrinsics, pose: Pose,
                            grid: GridSpec, attributes: Optional[np.ndarray] = None,
                            max_range: Optional[float] = None) -> VoxelEvidence:
    """Full chain: back-project, move to the world frame, voxelize."""
    cloud = depth_to_pointcloud(depth, seg, intr, max_range=max_range, attributes=attributes)
    return voxelize(transform_to_world(cloud, pose), grid)


def pixel_points_world(depth: np.ndarray, mask: np.ndarray, intr: CameraIntrinsics,
                       pose: Pose) -> np.ndarray:
    """World coordinates of the valid-depth pixels selected by a boolean mask."""
    v, u = np.nonzero(mask & np.isfinite(depth) & (depth > 0))
    d = depth[v, u]
    cx, cy = intr.principal_point
    f = intr.focal_length_px
    points = np.stack([(u - cx) * d / f, -(v - cy) * d / f, d], axis=-1)
    return points @ camera_to_world_rotation(pose).T + pose.position
