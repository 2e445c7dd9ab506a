"""
BEV Feature Extraction

Lifts raw sensor data into the shared bird's-eye-view plane:
- Lidar: voxel counts flattened along z, plus max-height and mean-intensity planes
- Camera: every pixel is unprojected along its ray to the estimated depth and
  bilinearly splatted into the grid, banded by radial distance
"""

import logging
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from gatedbev.config.settings import FeatureConfig
from gatedbev.perception.adverseop_synth import NO_RETURN, CameraImage, pixel_ray_directions
from gatedbev.perception.geometry import BEVGridSpec, PointCloud, voxelize

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BEVFeatures:
    channels: np.ndarray  # (C, H, W) float64
    modality: Literal["lidar", "camera"]
    grid: BEVGridSpec

    def __post_init__(self):
        if self.channels.ndim != 3 or self.channels.shape[1:] != (self.grid.height, self.grid.width):
            raise ValueError(
                f"{self.modality} features of shape {self.channels.shape} do not fit a "
                f"{self.grid.height}x{self.grid.width} grid"
            )
        if not np.all(np.isfinite(self.channels)):
            raise ValueError(f"{self.modality} features must be finite")

    @property
    def num_channels(self) -> int:
        return self.channels.shape[0]


def lidar_bev(cloud: PointCloud, grid: BEVGridSpec, features: FeatureConfig = FeatureConfig()) -> BEVFeatures:
    """z_bins occupancy planes + normalized max-z + mean intensity."""
    vox = voxelize(cloud, grid)
    occupancy = np.clip(vox.counts / features.occupancy_cap, 0.0, 1.0)
    height = (vox.max_z - grid.z_range[0]) / (grid.z_range[1] - grid.z_range[0])
    channels = np.concatenate([occupancy, height[None], vox.mean_intensity[None]], axis=0)
    return BEVFeatures(channels=channels.astype(np.float64), modality="lidar", grid=grid)


def _bilinear_neighbours(x: np.ndarray, y: np.ndarray, grid: BEVGridSpec):
    """Yield (iy, ix, weight) for the four cell centers around each point; weights sum to 1."""
    gx = (x - grid.x_range[0]) / grid.cell_size - 0.5
    gy = (y - grid.y_range[0]) / grid.cell_size - 0.5
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = gx - x0
    fy = gy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            # edge points fold their outside share back into the border cells
            iy = np.clip(y0 + dy, 0, grid.height - 1)
            ix = np.clip(x0 + dx, 0, grid.width - 1)
            yield iy, ix, wy * wx


def unproject_pixels(image: CameraImage):
    """
    Ego-frame points of every pixel that carries a depth estimate.

    Returns:
        (xyz (N, 3), intensity (N,), depth (N,)) in row-major pixel order
    """
    dirs = pixel_ray_directions(image.width, image.height, image.hfov).reshape(-1, 3)
    dirs = dirs @ image.pose.rotation_matrix().T
    depth = image.depth.reshape(-1).astype(np.float64)
    intensity = image.intensity.reshape(-1).astype(np.float64)
    valid = depth != NO_RETURN
    xyz = np.asarray(image.pose.translation) + dirs[valid] * depth[valid, None]
    return xyz, intensity[valid], depth[valid]


def camera_bev(images: Sequence[CameraImage], grid: BEVGridSpec,
               features: FeatureConfig = FeatureConfig()) -> BEVFeatures:
    """D radial depth bands of splatted intensity + total mass + normalized hit count."""
    D = features.depth_bands
    band_width = features.band_range_m / D
    planes = np.zeros((D + 2, grid.height, grid.width), dtype=np.float64)

    # cameras are reduced in a fixed order so sums are bit-stable
    for cam_idx, image in enumerate(images):
        xyz, intensity, depth = unproject_pixels(image)
        inside = grid.contains_xy(xyz[:, 0], xyz[:, 1])
        xyz, intensity, depth = xyz[inside], intensity[inside], depth[inside]
        band = np.minimum(np.floor(depth / band_width).astype(np.int64), D - 1)
        for iy, ix, w in _bilinear_neighbours(xyz[:, 0], xyz[:, 1], grid):
            np.add.at(planes, (band, iy, ix), w * intensity)
            np.add.at(planes[D], (iy, ix), w * intensity)
            np.add.at(planes[D + 1], (iy, ix), w)
        logger.debug(f"Camera {cam_idx}: splatted {len(depth)} in-grid pixels")

    planes[D + 1] = np.clip(planes[D + 1] / features.hit_cap, 0.0, 1.0)
    return BEVFeatures(channels=planes, modality="camera", grid=grid)


def precondition_camera(features: BEVFeatures) -> np.ndarray:
    """log1p-compress camera mass planes before they enter the network."""
    return np.log1p(features.channels)
