import logging
import math
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from ..core.errors import InvalidInput
from ..types.arrays import BoolArray, FloatArray, Points
from .observation import DepthFrame, Intrinsics, NoiseModel, RigidTransform, pixel_rays

logger = logging.getLogger(__name__)

Vec3 = tuple[float, float, float]

HIT_TOLERANCE = 1e-6
MAX_TRACE_STEPS = 256
PROJECTION_TOLERANCE = 1e-9


class Sphere(BaseModel):
    kind: Literal["sphere"] = "sphere"
    center: Vec3 = (0.0, 0.0, 0.0)
    radius: float = Field(gt=0)

    def sdf(self, p: Points) -> FloatArray:
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def area(self, bounds=None) -> float:
        return 4.0 * math.pi * self.radius**2

    def sample(self, count: int, rng: np.random.Generator, bounds=None) -> Points:
        u = rng.normal(size=(count, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * u


class Box(BaseModel):
    kind: Literal["box"] = "box"
    center: Vec3 = (0.0, 0.0, 0.0)
    half_extents: Vec3

    @field_validator("half_extents")
    @classmethod
    def _positive(cls, v: Vec3) -> Vec3:
        if min(v) <= 0:
            raise ValueError("half extents must be > 0")
        return v

    def sdf(self, p: Points) -> FloatArray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def _face_areas(self) -> FloatArray:
        hx, hy, hz = self.half_extents
        # +-x, +-y, +-z faces
        return np.repeat(np.array([4 * hy * hz, 4 * hx * hz, 4 * hx * hy]), 2)

    def area(self, bounds=None) -> float:
        return float(self._face_areas().sum())

    def sample(self, count: int, rng: np.random.Generator, bounds=None) -> Points:
        areas = self._face_areas()
        face = rng.choice(6, size=count, p=areas / areas.sum())
        h = np.asarray(self.half_extents)
        local = (rng.random((count, 3)) * 2.0 - 1.0) * h
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        local[np.arange(count), axis] = sign * h[axis]
        return np.asarray(self.center) + local


class Plane(BaseModel):
    """Half-space boundary <normal, p> = offset; positive on the normal side."""

    kind: Literal["plane"] = "plane"
    normal: Vec3 = (0.0, 0.0, 1.0)
    offset: float = 0.0

    @field_validator("normal")
    @classmethod
    def _unit(cls, v: Vec3) -> Vec3:
        n = np.asarray(v, dtype=np.float64)
        norm = float(np.linalg.norm(n))
        if norm == 0:
            raise ValueError("plane normal must be nonzero")
        return tuple(float(c) for c in n / norm)

    def sdf(self, p: Points) -> FloatArray:
        return p @ np.asarray(self.normal) - self.offset

    def area(self, bounds=None) -> float:
        if bounds is None:
            raise InvalidInput("a plane needs scene bounds to be sampled")
        lo, hi = (np.asarray(b) for b in bounds)
        extent = hi - lo
        # exact for axis-aligned normals
        return float(np.prod(extent) / (np.abs(np.asarray(self.normal)) @ extent))

    def sample(self, count: int, rng: np.random.Generator, bounds=None) -> Points:
        lo, hi = (np.asarray(b) for b in bounds)
        p = lo + rng.random((count, 3)) * (hi - lo)
        n = np.asarray(self.normal)
        return p - (p @ n - self.offset)[:, None] * n


Primitive = Annotated[Union[Sphere, Box, Plane], Field(discriminator="kind")]


class AnalyticScene(BaseModel):
    primitives: list[Primitive] = Field(min_length=1)
    bounds: tuple[Vec3, Vec3] | None = Field(
        None, description="axis-aligned workspace box (m); crops rendering, sampling and evaluation"
    )

    def exact_sdf(self, p: Points) -> FloatArray:
        p = np.asarray(p, dtype=np.float64)
        return np.min(np.stack([prim.sdf(p) for prim in self.primitives]), axis=0)

    def gradient(self, p: Points, h: float = 1e-7) -> Points:
        p = np.asarray(p, dtype=np.float64)
        g = np.empty_like(p)
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            g[..., axis] = (self.exact_sdf(p + e) - self.exact_sdf(p - e)) / (2 * h)
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-300)

    def inside_bounds(self, p: Points, margin: float = 0.0) -> BoolArray:
        if self.bounds is None:
            return np.ones(np.asarray(p).shape[:-1], dtype=bool)
        lo, hi = (np.asarray(b) for b in self.bounds)
        return np.all((p >= lo - margin) & (p <= hi + margin), axis=-1)

    model_config = {"extra": "forbid"}


def render_depth(
    scene: AnalyticScene,
    pose: RigidTransform,
    intrinsics: Intrinsics,
    width: int,
    height: int,
    noise: NoiseModel | None = None,
    seed: int | list[int] = 0,
    frame_id: int = 0,
    max_distance: float = 20.0,
) -> DepthFrame:
    """Sphere-trace the scene; misses (and hits outside the scene bounds) give depth 0."""
    vs, us = np.mgrid[0:height, 0:width]
    rays = pixel_rays(us.reshape(-1), vs.reshape(-1), intrinsics, pose)
    origin = pose.camera_center
    t = np.zeros(rays.shape[0])
    hit = np.zeros(rays.shape[0], dtype=bool)
    live = np.ones(rays.shape[0], dtype=bool)

    for _ in range(MAX_TRACE_STEPS):
        idx = np.nonzero(live)[0]
        if idx.size == 0:
            break
        d = scene.exact_sdf(origin + t[idx, None] * rays[idx])
        done = np.abs(d) < HIT_TOLERANCE
        hit[idx[done]] = True
        t[idx[~done]] += d[~done]
        escaped = t[idx] > max_distance
        live[idx[done | escaped]] = False

    points = origin + t[:, None] * rays
    hit &= scene.inside_bounds(points)
    # z-depth along the optical axis
    depth = np.where(hit, t * (rays @ pose.optical_axis), 0.0)

    if noise is not None:
        rng = np.random.default_rng(seed)
        perturb = rng.normal(size=depth.shape) * noise.sigma_depth(depth)
        depth = np.where(hit, np.maximum(depth + perturb, 1e-6), 0.0)

    logger.debug(f"frame {frame_id}: {int(hit.sum())} of {hit.size} pixels hit")
    return DepthFrame(depth.reshape(height, width), intrinsics, pose, frame_id)


def _project_to_surface(scene: AnalyticScene, p: Points, iterations: int = 16) -> Points:
    for _ in range(iterations):
        d = scene.exact_sdf(p)
        off = np.abs(d) >= PROJECTION_TOLERANCE
        if not off.any():
            break
        p[off] -= d[off, None] * scene.gradient(p[off])
    return p


def sample_ground_truth(scene: AnalyticScene, count: int, seed: int = 0) -> Points:
    """Area-weighted samples on the zero level set of the union, cropped to the bounds."""
    if count < 1:
        raise InvalidInput("ground-truth sample count must be >= 1")
    rng = np.random.default_rng(seed)
    areas = np.array([prim.area(scene.bounds) for prim in scene.primitives])
    weights = areas / areas.sum()
    kept: list[Points] = []
    remaining = count
    for _ in range(64):
        per_primitive = rng.multinomial(remaining, weights)
        batch = [
            prim.sample(int(k), rng, scene.bounds)
            for prim, k in zip(scene.primitives, per_primitive)
            if k > 0
        ]
        p = _project_to_surface(scene, np.concatenate(batch))
        # drop points swallowed by another primitive or pushed off the workspace
        ok = (np.abs(scene.exact_sdf(p)) < PROJECTION_TOLERANCE) & scene.inside_bounds(p)
        kept.append(p[ok][:remaining])
        remaining -= int(ok.sum())
        if remaining <= 0:
            return np.concatenate(kept)[:count]
    raise InvalidInput("scene surface lies mostly outside its bounds", requested=count)


def canonical_scene(sphere_radius: float = 0.15, plane_z: float | None = -0.15) -> AnalyticScene:
    """Sphere at the origin resting on a ground plane, cropped to a box around it."""
    r = sphere_radius
    primitives: list = [Sphere(center=(0.0, 0.0, 0.0), radius=r)]
    floor = -r - 0.01
    if plane_z is not None:
        primitives.append(Plane(normal=(0.0, 0.0, 1.0), offset=plane_z))
        floor = plane_z - 0.01
    return AnalyticScene(
        primitives=primitives,
        bounds=((-2 * r, -2 * r, floor), (2 * r, 2 * r, r + 0.01)),
    )


def canonical_intrinsics(width: int = 160, height: int = 120, focal: float = 150.0) -> Intrinsics:
    return Intrinsics(fx=focal, fy=focal, cx=(width - 1) / 2, cy=(height - 1) / 2)


def canonical_poses(
    radius: float = 0.6,
    elevations_deg: tuple[float, ...] = (25.0, 45.0, 65.0),
    azimuths: int = 8,
    target: Vec3 = (0.0, 0.0, 0.0),
) -> list[RigidTransform]:
    poses = []
    for elevation in np.radians(elevations_deg):
        for azimuth in np.arange(azimuths) * (2 * math.pi / azimuths):
            eye = np.asarray(target) + radius * np.array(
                [
                    math.cos(elevation) * math.cos(azimuth),
                    math.cos(elevation) * math.sin(azimuth),
                    math.sin(elevation),
                ]
            )
            poses.append(RigidTransform.look_at(eye, target))
    return poses
