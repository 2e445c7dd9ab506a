"""
Geometry Module

Oriented boxes, point clouds and the bird's-eye-view (BEV) grid shared by
every stage of the pipeline:
- Rigid sensor-to-ego transforms
- Rotated-rectangle IoU by convex polygon clipping
- Point-in-box containment
- Voxel binning of lidar points into the BEV grid

Frame convention: x forward, y left, z up (ego frame), yaw about +z.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.spatial.transform import Rotation

Vec3 = Tuple[float, float, float]


def normalize_yaw(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = angle - 2.0 * math.pi * math.ceil((angle - math.pi) / (2.0 * math.pi))
    # ceil() can leave -pi when angle is an odd multiple of pi below zero
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


# ==================== DOMAIN TYPES ====================

class Box3D(BaseModel):
    """Oriented 3D bounding box in the ego frame."""
    model_config = ConfigDict(frozen=True)

    center: Vec3
    extent: Vec3  # length, width, height
    yaw: float
    class_id: int
    score: Optional[float] = None

    @field_validator('extent')
    def extent_positive(cls, v):
        if any(not (e > 0) for e in v):
            raise ValueError(f'Box extent must be strictly positive, got {v}')
        return v

    @field_validator('yaw')
    def yaw_normalized(cls, v):
        if not math.isfinite(v):
            raise ValueError('Box yaw must be finite')
        return normalize_yaw(v)

    @field_validator('score')
    def score_in_unit_interval(cls, v):
        if v is not None and not (0.0 <= v <= 1.0):
            raise ValueError(f'Box score must lie in [0, 1], got {v}')
        return v

    @field_validator('class_id')
    def class_id_non_negative(cls, v):
        if v < 0:
            raise ValueError('class_id must be non-negative')
        return v

    def bev_corners(self) -> np.ndarray:
        """Counter-clockwise (4, 2) footprint corners in the x-y plane."""
        half_l, half_w = self.extent[0] / 2.0, self.extent[1] / 2.0
        local = np.array([
            [half_l, half_w],
            [-half_l, half_w],
            [-half_l, -half_w],
            [half_l, -half_w],
        ])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])

    def bev_area(self) -> float:
        return self.extent[0] * self.extent[1]


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Lidar sample carrier: an (N, 4) array of x, y, z, intensity."""
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"PointCloud expects an (N, 4) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("PointCloud coordinates must be finite")
        if pts.shape[0] and (pts[:, 3].min() < 0.0 or pts[:, 3].max() > 1.0):
            raise ValueError("PointCloud intensity must lie in [0, 1]")
        object.__setattr__(self, "points", pts)

    @classmethod
    def empty(cls, dtype=np.float64) -> "PointCloud":
        return cls(np.zeros((0, 4), dtype=dtype))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


class BEVGridSpec(BaseModel):
    """Metric extent and resolution of the shared BEV plane."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    x_range: Tuple[float, float] = (-32.0, 32.0)
    y_range: Tuple[float, float] = (-32.0, 32.0)
    z_range: Tuple[float, float] = (-2.0, 6.0)
    cell_size: float = 1.0
    z_bins: int = 8

    @model_validator(mode="after")
    def check_layout(self):
        for name, (lo, hi) in (("x_range", self.x_range), ("y_range", self.y_range), ("z_range", self.z_range)):
            if not hi > lo:
                raise ValueError(f"{name} must be nonempty, got {(lo, hi)}")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.z_bins < 1:
            raise ValueError("z_bins must be at least 1")
        for name, (lo, hi) in (("x_range", self.x_range), ("y_range", self.y_range)):
            cells = (hi - lo) / self.cell_size
            if abs(cells - round(cells)) > 1e-9 * max(1.0, cells):
                raise ValueError(f"{name} span {hi - lo} is not divisible by cell_size {self.cell_size}")
        return self

    @property
    def width(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_size))

    @property
    def height(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_size))

    @property
    def z_step(self) -> float:
        return (self.z_range[1] - self.z_range[0]) / self.z_bins

    def cell_center(self, iy: int, ix: int) -> Tuple[float, float]:
        return (
            self.x_range[0] + (ix + 0.5) * self.cell_size,
            self.y_range[0] + (iy + 0.5) * self.cell_size,
        )

    def cell_index(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Floor binning with the max edge folded into the last cell."""
        ix = np.floor((np.asarray(x) - self.x_range[0]) / self.cell_size).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.y_range[0]) / self.cell_size).astype(np.int64)
        return np.minimum(iy, self.height - 1), np.minimum(ix, self.width - 1)

    def contains_xy(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x, y = np.asarray(x), np.asarray(y)
        return (
            (x >= self.x_range[0]) & (x <= self.x_range[1])
            & (y >= self.y_range[0]) & (y <= self.y_range[1])
        )


# 180x180 plane of the full-scale detector; opt-in through config
FULL_RANGE_GRID = BEVGridSpec(x_range=(-54.0, 54.0), y_range=(-54.0, 54.0), cell_size=0.6)


class SensorPose(BaseModel):
    """Rigid transform from a sensor frame into the ego frame."""
    model_config = ConfigDict(frozen=True)

    translation: Vec3 = (0.0, 0.0, 0.0)
    yaw_pitch_roll: Vec3 = (0.0, 0.0, 0.0)

    @field_validator('translation', 'yaw_pitch_roll')
    def finite(cls, v):
        if not all(math.isfinite(c) for c in v):
            raise ValueError('Pose components must be finite')
        return v

    def rotation(self) -> Rotation:
        return Rotation.from_euler("ZYX", self.yaw_pitch_roll)

    def rotation_matrix(self) -> np.ndarray:
        return self.rotation().as_matrix()

    def inverse(self) -> "SensorPose":
        inv = self.rotation().inv()
        t = -inv.apply(np.array(self.translation))
        return SensorPose(
            translation=tuple(float(c) for c in t),
            yaw_pitch_roll=tuple(float(a) for a in inv.as_euler("ZYX")),
        )


# ==================== OPERATIONS ====================

def transform_points(cloud: PointCloud, pose: SensorPose) -> PointCloud:
    """Apply a rigid pose to every point; intensities are carried through."""
    if len(cloud) == 0:
        return PointCloud(cloud.points.copy())
    rot = pose.rotation_matrix()
    xyz = cloud.xyz @ rot.T + np.asarray(pose.translation)
    out = np.empty_like(cloud.points, dtype=np.result_type(cloud.points.dtype, np.float64))
    out[:, :3] = xyz
    out[:, 3] = cloud.intensity
    return PointCloud(out)


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: List[np.ndarray], clip: np.ndarray) -> List[np.ndarray]:
    """Sutherland-Hodgman clipping of a polygon by a counter-clockwise convex polygon."""
    output = subject
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        polygon, output = output, []
        prev = polygon[-1]
        prev_side = side(prev)
        for cur in polygon:
            cur_side = side(cur)
            if cur_side >= 0:
                if prev_side < 0:
                    t = prev_side / (prev_side - cur_side)
                    output.append(prev + t * (cur - prev))
                output.append(cur)
            elif prev_side >= 0:
                t = prev_side / (prev_side - cur_side)
                output.append(prev + t * (cur - prev))
            prev, prev_side = cur, cur_side
    return output


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    reach_a = 0.5 * math.hypot(a.extent[0], a.extent[1])
    reach_b = 0.5 * math.hypot(b.extent[0], b.extent[1])
    if center_distance(a, b) > reach_a + reach_b:
        return 0.0
    clipped = _clip_polygon(list(a.bev_corners()), b.bev_corners())
    if len(clipped) < 3:
        return 0.0
    return _polygon_area(np.array(clipped))


def _footprint_key(box: Box3D) -> Tuple[float, ...]:
    return (*box.center[:2], *box.extent[:2], box.yaw)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two yaw-rotated footprints; z is ignored."""
    key_a, key_b = _footprint_key(a), _footprint_key(b)
    if key_a == key_b:
        return 1.0
    # clip in a fixed order so the result is exactly symmetric
    if key_b < key_a:
        a, b = b, a
    inter = bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.bev_area() + b.bev_area() - inter
    return float(min(1.0, max(0.0, inter / union)))


def points_in_box(cloud: PointCloud, box: Box3D) -> List[int]:
    """Indices of points inside the cuboid; the boundary counts as inside."""
    if len(cloud) == 0:
        return []
    rel = cloud.xyz.astype(np.float64) - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local_x = c * rel[:, 0] + s * rel[:, 1]
    local_y = -s * rel[:, 0] + c * rel[:, 1]
    half = np.asarray(box.extent) / 2.0
    inside = (
        (np.abs(local_x) <= half[0])
        & (np.abs(local_y) <= half[1])
        & (np.abs(rel[:, 2]) <= half[2])
    )
    return np.flatnonzero(inside).tolist()


def center_distance(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Pre-flattening voxel statistics of one cloud."""
    counts: np.ndarray          # (z_bins, H, W) int64
    max_z: np.ndarray           # (H, W), grid z_min where empty
    mean_intensity: np.ndarray  # (H, W), 0 where empty


def voxelize(cloud: PointCloud, grid: BEVGridSpec) -> VoxelGrid:
    H, W, Z = grid.height, grid.width, grid.z_bins
    counts = np.zeros((Z, H, W), dtype=np.int64)
    max_z = np.full((H, W), grid.z_range[0], dtype=np.float64)
    intensity_sum = np.zeros((H, W), dtype=np.float64)

    if len(cloud):
        pts = cloud.points.astype(np.float64)
        x, y, z, inten = pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3]
        keep = grid.contains_xy(x, y) & (z >= grid.z_range[0]) & (z <= grid.z_range[1])
        x, y, z, inten = x[keep], y[keep], z[keep], inten[keep]
        iy, ix = grid.cell_index(x, y)
        iz = np.minimum(np.floor((z - grid.z_range[0]) / grid.z_step).astype(np.int64), Z - 1)
        np.add.at(counts, (iz, iy, ix), 1)
        np.maximum.at(max_z, (iy, ix), z)
        np.add.at(intensity_sum, (iy, ix), inten)

    per_cell = counts.sum(axis=0)
    mean_intensity = np.divide(
        intensity_sum, per_cell, out=np.zeros_like(intensity_sum), where=per_cell > 0
    )
    return VoxelGrid(counts=counts, max_z=max_z, mean_intensity=mean_intensity)
