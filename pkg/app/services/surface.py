import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates
from skimage import measure

from ..core.errors import EmptyMesh, InvalidInput
from ..types.arrays import FloatArray, IntArray, Points
from .tsdf import TsdfVolume
from .voxel_grid import CELL_CORNERS, VoxelGrid, voxel_to_world

logger = logging.getLogger(__name__)


@dataclass
class TriangleMesh:
    vertices: Points
    triangles: IntArray
    vertex_variance: FloatArray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise InvalidInput("triangle index out of range")
        if self.vertex_variance is not None:
            self.vertex_variance = np.asarray(self.vertex_variance, dtype=np.float64)
            if self.vertex_variance.shape != (len(self.vertices),):
                raise InvalidInput("vertex_variance needs one entry per vertex")

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    def face_normals(self) -> Points:
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def areas(self) -> FloatArray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)


def _dense_box(grid: VoxelGrid, values: FloatArray, fill: float):
    lo, hi = grid.bounding_box()
    shape = tuple(int(s) for s in hi - lo + 1)
    local = grid.coords - lo
    dense = np.full(shape, fill)
    active = np.zeros(shape, dtype=bool)
    dense[local[:, 0], local[:, 1], local[:, 2]] = values
    active[local[:, 0], local[:, 1], local[:, 2]] = True
    return lo, dense, active


def _cell_mask(active: np.ndarray) -> np.ndarray:
    """mask[x, y, z] is set when all 8 corners of the cell based at (x, y, z) are active."""
    mask = np.zeros_like(active)
    nx, ny, nz = active.shape
    if min(nx, ny, nz) < 2:
        return mask
    full = np.ones((nx - 1, ny - 1, nz - 1), dtype=bool)
    for dx, dy, dz in CELL_CORNERS:
        full &= active[dx : dx + nx - 1, dy : dy + ny - 1, dz : dz + nz - 1]
    mask[: nx - 1, : ny - 1, : nz - 1] = full
    return mask


def _corner_mask(mask: np.ndarray) -> np.ndarray:
    corners = np.zeros_like(mask)
    nx, ny, nz = mask.shape
    base = mask[: nx - 1, : ny - 1, : nz - 1]
    for dx, dy, dz in CELL_CORNERS:
        corners[dx : dx + nx - 1, dy : dy + ny - 1, dz : dz + nz - 1] |= base
    return corners


def marching_cubes(
    grid: VoxelGrid,
    mu: FloatArray,
    s_hat: FloatArray | None = None,
    iso: float = 0.0,
    tau: float | None = None,
) -> TriangleMesh:
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (grid.n_active,):
        raise InvalidInput(f"field has {mu.shape[0]} values for {grid.n_active} active nodes")
    tau = grid.config.voxel_size if tau is None else tau
    # keep vertices off grid corners
    mu = np.where(mu == iso, iso + 1e-12 * tau, mu)

    lo, dense, active = _dense_box(grid, mu, fill=float(mu.max()))
    mask = _cell_mask(active)
    if not mask.any():
        raise EmptyMesh("no cell has all eight corners active")
    cell_values = dense[_corner_mask(mask)]
    if not (cell_values.min() < iso < cell_values.max()):
        raise EmptyMesh("field has no sign change at the iso level", iso=iso)

    try:
        verts, faces, _, _ = measure.marching_cubes(
            dense,
            level=iso,
            mask=mask,
            gradient_direction="ascent",
            allow_degenerate=False,
        )
    except (ValueError, RuntimeError) as e:
        raise EmptyMesh(f"marching cubes found no surface: {e}")
    if len(faces) == 0:
        raise EmptyMesh("marching cubes produced no triangles")

    variance = None
    if s_hat is not None:
        _, dense_s, _ = _dense_box(grid, np.asarray(s_hat, dtype=np.float64), fill=0.0)
        variance = np.maximum(map_coordinates(dense_s, verts.T, order=1, mode="nearest"), 0.0)

    mesh = TriangleMesh(
        vertices=voxel_to_world(verts + lo, grid.config),
        triangles=faces,
        vertex_variance=variance,
    )
    logger.info(f"marching cubes: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles")
    return mesh


def extract_field_mesh(tsdf: TsdfVolume, iso: float = 0.0) -> TriangleMesh:
    """Mesh the observed voxels of a TSDF volume (the bootstrap surface)."""
    coords, values, weights = tsdf.dense_voxels()
    observed = weights > 0
    if not observed.any():
        raise EmptyMesh("TSDF volume has no observed voxels")
    grid = VoxelGrid.from_coords(coords[observed], tsdf.config)
    return marching_cubes(grid, values[observed], iso=iso, tau=tsdf.tau)


def sample_mesh_points(mesh: TriangleMesh, count: int, seed: int = 0) -> Points:
    if count < 1:
        raise InvalidInput("sample count must be >= 1")
    areas = mesh.areas()
    total = areas.sum()
    if mesh.n_triangles == 0 or total <= 0:
        raise EmptyMesh("mesh has no area to sample")
    rng = np.random.default_rng(seed)
    tri = rng.choice(mesh.n_triangles, size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    v = mesh.vertices[mesh.triangles[tri]]
    return (
        (1.0 - r1)[:, None] * v[:, 0]
        + (r1 * (1.0 - r2))[:, None] * v[:, 1]
        + (r1 * r2)[:, None] * v[:, 2]
    )


def sample_iso_points(grid: VoxelGrid, mu: FloatArray, count: int, seed: int = 0) -> Points:
    return sample_mesh_points(marching_cubes(grid, mu), count, seed)
