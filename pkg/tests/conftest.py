from dataclasses import dataclass

import numpy as np
import pytest

from app.core.config import PipelineConfig
from app.services.observation import Intrinsics, RigidTransform
from app.services.voxel_grid import GridConfig, VoxelGrid


@dataclass
class SphereField:
    grid: VoxelGrid
    mu: np.ndarray
    center: np.ndarray
    radius: float


def sphere_band(radius: float, voxel_size: float, half_width: float, block_size: int = 8) -> SphereField:
    """Active nodes within half_width voxels of a sphere at the origin, valued with its exact SDF."""
    cfg = GridConfig(voxel_size=voxel_size, block_size=block_size)
    r_vox = radius / voxel_size
    extent = int(np.ceil(r_vox + half_width)) + 1
    axis = np.arange(-extent, extent + 1)
    coords = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    sdf = np.linalg.norm(coords * voxel_size, axis=1) - radius
    keep = np.abs(sdf) <= half_width * voxel_size
    grid = VoxelGrid.from_coords(coords[keep], cfg)
    mu = np.linalg.norm(grid.positions(), axis=1) - radius
    return SphereField(grid=grid, mu=mu, center=np.zeros(3), radius=radius)


@pytest.fixture(scope="session")
def sphere_field() -> SphereField:
    return sphere_band(radius=0.1037, voxel_size=0.01, half_width=3.0)


@pytest.fixture(scope="session")
def coarse_sphere_field() -> SphereField:
    return sphere_band(radius=0.1213, voxel_size=0.02, half_width=2.5)


@pytest.fixture
def wall_intrinsics() -> Intrinsics:
    return Intrinsics(fx=20.0, fy=20.0, cx=9.5, cy=9.5)


@pytest.fixture
def identity_pose() -> RigidTransform:
    return RigidTransform.identity()


@pytest.fixture(scope="session")
def tiny_config() -> PipelineConfig:
    """Sphere-only scene small enough for an end-to-end run in seconds."""
    return PipelineConfig.model_validate(
        {
            "seed": 3,
            "workers": 1,
            "scene": {
                "width": 48,
                "height": 36,
                "fx": 50.0,
                "fy": 50.0,
                "cx": 23.5,
                "cy": 17.5,
                "camera_radius": 0.5,
                "elevations_deg": [20.0, 60.0],
                "azimuth_count": 3,
                "sphere_radius": 0.1,
                "plane_z": None,
                "gt_points": 2000,
            },
            "grid": {"voxel_size": 0.015, "block_size": 4},
            "tsdf": {"tau": 0.045},
            "solver": {"max_iter": 4000},
            "variance": {"k_probes": 4},
            "nbv": {"candidate_count": 3, "candidate_radius": 0.5, "stride": 4},
            "evaluation": {"mesh_samples": 3000},
        }
    )
