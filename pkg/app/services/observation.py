import logging
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from pydantic import BaseModel, Field
from scipy import sparse

from ..core.errors import DegenerateNeighborhood, InvalidDepth, InvalidInput
from ..types.arrays import BoolArray, FloatArray, IntArray, Points
from .voxel_grid import VoxelGrid, trilinear_stencils

logger = logging.getLogger(__name__)

INCIDENCE_FLOOR = 0.1


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """World-from-camera transform T_{w<-c}."""

    rotation: FloatArray
    translation: FloatArray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise InvalidInput("pose rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix34(cls, m: FloatArray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    @classmethod
    def look_at(
        cls, eye: FloatArray, target: FloatArray, up: FloatArray | None = None
    ) -> "RigidTransform":
        # OpenCV camera: x right, y down, z forward
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, dtype=np.float64)
        if abs(float(forward @ up)) > 1.0 - 1e-9:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward], axis=1), eye)

    def matrix34(self) -> FloatArray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def apply(self, points: Points) -> Points:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    @property
    def camera_center(self) -> FloatArray:
        return self.translation

    @property
    def optical_axis(self) -> FloatArray:
        return self.rotation[:, 2]


class Intrinsics(BaseModel):
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float

    @property
    def matrix(self) -> FloatArray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    model_config = {"frozen": True, "extra": "forbid"}


@dataclass
class DepthFrame:
    depth: FloatArray
    intrinsics: Intrinsics
    pose: RigidTransform
    frame_id: int = 0

    @property
    def height(self) -> int:
        return int(self.depth.shape[0])

    @property
    def width(self) -> int:
        return int(self.depth.shape[1])

    def valid_mask(self, max_depth: float | None = None) -> BoolArray:
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(self.depth) & (self.depth > 0)
            if max_depth is not None:
                valid &= self.depth <= max_depth
        return valid

    def with_max_depth(self, max_depth: float | None) -> "DepthFrame":
        if max_depth is None:
            return self
        depth = np.where(self.valid_mask(max_depth), self.depth, 0.0)
        return DepthFrame(depth, self.intrinsics, self.pose, self.frame_id)

    def project(self, points: Points) -> tuple[FloatArray, FloatArray]:
        """World points -> (pixel coordinates (P, 2), camera-frame depth (P,))."""
        cam = self.pose.inverse().apply(points)
        z = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.intrinsics.fx * cam[..., 0] / z + self.intrinsics.cx
            v = self.intrinsics.fy * cam[..., 1] / z + self.intrinsics.cy
        return np.stack([u, v], axis=-1), z

    def backprojected(self) -> Points:
        """World point for every pixel (H, W, 3); invalid pixels give NaN."""
        vs, us = np.mgrid[0 : self.height, 0 : self.width]
        depth = np.where(self.valid_mask(), self.depth, np.nan)
        return backproject_pixels(us, vs, depth, self.intrinsics, self.pose)


class NoiseModel(BaseModel):
    sigma_depth_a: float = Field(0.001, ge=0, description="sigma_depth(d) = a + b d^2 (m)")
    sigma_depth_b: float = Field(0.0019, ge=0, description="(1/m)")
    sigma_pose: float = Field(0.002, ge=0, description="default per-frame pose noise (m)")
    sigma_pose_by_frame: dict[int, float] = Field(
        default_factory=dict, description="per-frame overrides of sigma_pose (m)"
    )
    sigma_model: float = Field(0.0005, ge=0, description="model noise (m)")

    def sigma_depth(self, d: FloatArray) -> FloatArray:
        return self.sigma_depth_a + self.sigma_depth_b * np.square(d)

    def pose_sigma(self, t: int) -> float:
        return self.sigma_pose_by_frame.get(int(t), self.sigma_pose)

    model_config = {"frozen": True, "extra": "forbid"}


@dataclass
class Observation:
    y: float
    row: list[tuple[int, float]]
    sigma2: float
    provenance: tuple[int, tuple[int, int]]


@dataclass
class ObservationSet:
    """Struct-of-arrays store of M linearized observations."""

    y: FloatArray
    cols: IntArray
    weights: FloatArray
    sigma2: FloatArray
    frame_ids: IntArray
    pixels: IntArray
    _design: dict[int, sparse.csr_matrix] = field(default_factory=dict, repr=False)

    @classmethod
    def empty(cls) -> "ObservationSet":
        return cls(
            y=np.empty(0),
            cols=np.empty((0, 8), dtype=np.int64),
            weights=np.empty((0, 8)),
            sigma2=np.empty(0),
            frame_ids=np.empty(0, dtype=np.int64),
            pixels=np.empty((0, 2), dtype=np.int64),
        )

    @classmethod
    def concatenate(cls, fragments: list["ObservationSet"]) -> "ObservationSet":
        if not fragments:
            return cls.empty()
        return cls(
            y=np.concatenate([f.y for f in fragments]),
            cols=np.concatenate([f.cols for f in fragments]),
            weights=np.concatenate([f.weights for f in fragments]),
            sigma2=np.concatenate([f.sigma2 for f in fragments]),
            frame_ids=np.concatenate([f.frame_ids for f in fragments]),
            pixels=np.concatenate([f.pixels for f in fragments]),
        )

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def __getitem__(self, k: int) -> Observation:
        used = self.cols[k] >= 0
        return Observation(
            y=float(self.y[k]),
            row=[(int(c), float(w)) for c, w in zip(self.cols[k][used], self.weights[k][used])],
            sigma2=float(self.sigma2[k]),
            provenance=(int(self.frame_ids[k]), (int(self.pixels[k, 0]), int(self.pixels[k, 1]))),
        )

    def __iter__(self) -> Iterator[Observation]:
        for k in range(len(self)):
            yield self[k]

    @property
    def precision_weights(self) -> FloatArray:
        return 1.0 / self.sigma2

    def design_matrix(self, n: int) -> sparse.csr_matrix:
        if n not in self._design:
            from .sparse_linalg import canonical_csr

            m = len(self)
            rows = np.repeat(np.arange(m, dtype=np.int64), 8)
            cols = self.cols.reshape(-1)
            vals = self.weights.reshape(-1)
            used = cols >= 0
            self._design[n] = canonical_csr(rows[used], cols[used], vals[used], (m, n))
        return self._design[n]

    def remap(self, new_index: IntArray) -> "ObservationSet":
        """Re-index node columns (new_index[old] = new, -1 if removed)."""
        cols = np.where(self.cols >= 0, new_index[np.maximum(self.cols, 0)], -1)
        if np.any((cols < 0) & (self.cols >= 0)):
            raise InvalidInput("remap removes nodes referenced by observations")
        return ObservationSet(self.y, cols, self.weights, self.sigma2, self.frame_ids, self.pixels)

    def validate(self, n: int, tau: float) -> None:
        nnz = (self.cols >= 0).sum(axis=1)
        if np.any(np.abs(self.y) > tau) or np.any(self.sigma2 <= 0):
            raise InvalidInput("observation outside |y| <= tau or with sigma2 <= 0")
        if np.any(nnz < 1) or np.any(self.cols >= n):
            raise InvalidInput("observation row references invalid nodes")


def backproject_pixels(
    us: FloatArray, vs: FloatArray, d: FloatArray, intrinsics: Intrinsics, pose: RigidTransform
) -> Points:
    x = (np.asarray(us, dtype=np.float64) - intrinsics.cx) / intrinsics.fx
    y = (np.asarray(vs, dtype=np.float64) - intrinsics.cy) / intrinsics.fy
    cam = np.stack([x * d, y * d, np.asarray(d, dtype=np.float64) * np.ones_like(x)], axis=-1)
    return pose.apply(cam)


def backproject(
    u: tuple[float, float], d: float, intrinsics: Intrinsics, pose: RigidTransform
) -> FloatArray:
    if not np.isfinite(d) or d <= 0:
        raise InvalidDepth(f"depth must be finite and > 0, got {d}")
    return backproject_pixels(np.float64(u[0]), np.float64(u[1]), np.float64(d), intrinsics, pose)


def pixel_rays(us: FloatArray, vs: FloatArray, intrinsics: Intrinsics, pose: RigidTransform) -> Points:
    """Unit world-frame ray directions through pixels."""
    x = (np.asarray(us, dtype=np.float64) - intrinsics.cx) / intrinsics.fx
    y = (np.asarray(vs, dtype=np.float64) - intrinsics.cy) / intrinsics.fy
    cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    cam /= np.linalg.norm(cam, axis=-1, keepdims=True)
    return cam @ pose.rotation.T


def projective_sdf(x: Points, p: Points, n: Points, tau: float) -> FloatArray:
    return np.clip(np.sum(np.asarray(n) * (np.asarray(x) - np.asarray(p)), axis=-1), -tau, tau)


def noise_variance(
    d: FloatArray, t: int, incidence: FloatArray, noise: NoiseModel
) -> FloatArray:
    base = (
        np.square(noise.sigma_depth(np.asarray(d, dtype=np.float64)))
        + noise.pose_sigma(t) ** 2
        + noise.sigma_model**2
    )
    out = base / np.maximum(np.asarray(incidence, dtype=np.float64), INCIDENCE_FLOOR)
    return np.maximum(out, np.finfo(np.float64).tiny)


def estimate_normals(
    frame: DepthFrame,
    us: IntArray,
    vs: IntArray,
    world: Points | None = None,
    max_depth_jump: float | None = None,
) -> tuple[Points, BoolArray]:
    """Normals at integer pixels from central differences of backprojected tangents."""
    world = frame.backprojected() if world is None else world
    us = np.asarray(us, dtype=np.int64)
    vs = np.asarray(vs, dtype=np.int64)
    inside = (us >= 1) & (us < frame.width - 1) & (vs >= 1) & (vs < frame.height - 1)
    uc = np.clip(us, 1, frame.width - 2)
    vc = np.clip(vs, 1, frame.height - 2)

    tx = world[vc, uc + 1] - world[vc, uc - 1]
    ty = world[vc + 1, uc] - world[vc - 1, uc]
    n = np.cross(tx, ty)
    norm = np.linalg.norm(n, axis=-1)
    ok = inside & np.isfinite(norm) & np.all(np.isfinite(world[vc, uc]), axis=-1) & (norm >= 1e-12)

    if max_depth_jump is not None:
        d = frame.depth
        center = d[vc, uc]
        for dv, du in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            with np.errstate(invalid="ignore"):
                ok &= np.abs(d[vc + dv, uc + du] - center) <= max_depth_jump

    n = np.where(ok[..., None], n / np.where(ok, norm, 1.0)[..., None], np.nan)
    toward_camera = frame.pose.camera_center - world[vc, uc]
    flip = np.sum(n * toward_camera, axis=-1) < 0
    n = np.where(flip[..., None], -n, n)
    return n, ok


def estimate_normal(frame: DepthFrame, u: tuple[int, int]) -> FloatArray:
    n, ok = estimate_normals(frame, np.array([u[0]]), np.array([u[1]]))
    if not ok[0]:
        raise DegenerateNeighborhood("pixel neighborhood has invalid depth", pixel=str(u))
    return n[0]


def sample_ray_observations(
    frame: DepthFrame,
    grid: VoxelGrid,
    tau: float,
    noise: NoiseModel,
    stride: int = 2,
    samples_per_ray: int = 5,
    min_corners: int = 4,
    max_depth_jump: float | None = None,
) -> ObservationSet:
    if stride < 1 or samples_per_ray < 1:
        raise InvalidInput("stride and samples_per_ray must be >= 1")

    vs, us = np.mgrid[0 : frame.height : stride, 0 : frame.width : stride]
    us, vs = us.reshape(-1), vs.reshape(-1)
    valid = frame.valid_mask()[vs, us]
    us, vs = us[valid], vs[valid]

    world = frame.backprojected()
    normals, ok = estimate_normals(frame, us, vs, world, max_depth_jump)
    us, vs, normals = us[ok], vs[ok], normals[ok]
    if us.size == 0:
        return ObservationSet.empty()

    p = world[vs, us]
    depth = frame.depth[vs, us]
    rays = p - frame.pose.camera_center
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    incidence = np.abs(np.sum(normals * rays, axis=1))
    sigma2 = noise_variance(depth, frame.frame_id, incidence, noise)

    offsets = np.linspace(-tau, tau, samples_per_ray) if samples_per_ray > 1 else np.zeros(1)
    s = offsets.size
    x = (p[:, None, :] + offsets[None, :, None] * rays[:, None, :]).reshape(-1, 3)
    y = projective_sdf(
        x, np.repeat(p, s, axis=0), np.repeat(normals, s, axis=0), tau
    )
    cols, weights, accepted = trilinear_stencils(x, grid, min_corners)

    pixels = np.repeat(np.stack([us, vs], axis=1), s, axis=0)
    fragment = ObservationSet(
        y=y[accepted],
        cols=cols[accepted],
        weights=weights[accepted],
        sigma2=np.repeat(sigma2, s)[accepted],
        frame_ids=np.full(int(accepted.sum()), frame.frame_id, dtype=np.int64),
        pixels=pixels[accepted],
    )
    logger.debug(
        f"frame {frame.frame_id}: {us.size} rays, {len(fragment)} observations kept"
    )
    return fragment
