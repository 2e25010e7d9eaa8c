import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from pydantic import BaseModel, Field

from ..core.errors import AllCandidatesInvalid, InvalidInput, NoVisibleSurface, SolverError
from ..types.arrays import FloatArray, IntArray
from ..utils.parallel import ordered_map
from .observation import (
    DepthFrame,
    Intrinsics,
    NoiseModel,
    ObservationSet,
    RigidTransform,
    pixel_rays,
    sample_ray_observations,
)
from .posterior import estimate_diag_variance
from .sparse_linalg import PrecisionOperator
from .voxel_grid import VoxelGrid, interpolate, voxel_to_world

logger = logging.getLogger(__name__)

# ray-march steps evaluated per batch
_STEP_CHUNK = 64


@dataclass(frozen=True)
class ViewCandidate:
    id: int
    pose: RigidTransform
    intrinsics: Intrinsics
    width: int
    height: int


class CandidateScore(BaseModel):
    id: int
    utility: float = Field(ge=0, description="floored variance reduction (m^2)")
    raw_utility: float
    n_observations: int
    valid: bool = True
    selected: bool = False


class NbvReport(BaseModel):
    scores: list[CandidateScore]
    selected_id: int
    seed: int
    k_probes: int

    @property
    def selected(self) -> CandidateScore:
        return next(s for s in self.scores if s.id == self.selected_id)


@dataclass
class NbvContext:
    """Current posterior state shared by every candidate evaluation."""

    grid: VoxelGrid
    mu: FloatArray
    op: PrecisionOperator
    s_hat: FloatArray
    omega: IntArray
    tau: float
    noise: NoiseModel
    k_probes: int = 32
    seed: int = 0
    probe_tol: float = 1e-6
    variance_floor: float = 1e-12
    stride: int = 4
    max_range: float = 2.0
    samples_per_ray: int = 5
    min_corners: int = 4
    max_iter: int | None = None

    @classmethod
    def build(
        cls, grid: VoxelGrid, mu: FloatArray, op: PrecisionOperator, omega: IntArray, **options
    ) -> "NbvContext":
        """Compute the baseline variance with the probes every candidate will reuse."""
        k = options.get("k_probes", 32)
        seed = options.get("seed", 0)
        s_hat, _ = estimate_diag_variance(
            op,
            k=k,
            seed=seed,
            tol=options.get("probe_tol", 1e-6),
            variance_floor=options.get("variance_floor", 1e-12),
            max_iter=options.get("max_iter"),
        )
        return cls(grid=grid, mu=mu, op=op, s_hat=s_hat, omega=omega, **options)


def _ray_box(origin: FloatArray, rays: FloatArray, lo: FloatArray, hi: FloatArray):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    near = np.nanmax(np.minimum(t0, t1), axis=1)
    far = np.nanmin(np.maximum(t0, t1), axis=1)
    return np.maximum(near, 0.0), far


def expected_depth(
    candidate: ViewCandidate,
    grid: VoxelGrid,
    mu: FloatArray,
    max_range: float = 2.0,
    stride: int = 1,
    min_corners: int = 4,
) -> DepthFrame:
    """Depth where each ray first crosses mu from positive to negative; 0 where it never does."""
    intr = candidate.intrinsics
    if stride > 1:
        intr = Intrinsics(
            fx=intr.fx / stride,
            fy=intr.fy / stride,
            cx=(intr.cx + 0.5) / stride - 0.5,
            cy=(intr.cy + 0.5) / stride - 0.5,
        )
    width = max(1, candidate.width // stride)
    height = max(1, candidate.height // stride)
    vs, us = np.mgrid[0:height, 0:width]
    rays = pixel_rays(us.reshape(-1), vs.reshape(-1), intr, candidate.pose)
    origin = candidate.pose.camera_center

    lo, hi = grid.bounding_box()
    h = grid.config.voxel_size
    near, far = _ray_box(
        origin, rays, voxel_to_world(lo, grid.config) - h, voxel_to_world(hi, grid.config) + h
    )
    far = np.minimum(far, max_range)
    depth = np.zeros(rays.shape[0])
    live = np.nonzero(far > near)[0]
    step = 0.5 * h

    if live.size:
        n_steps = int(math.ceil(float((far[live] - near[live]).max()) / step)) + 1
        prev_t = near[live].copy()
        prev_v = interpolate(origin + prev_t[:, None] * rays[live], grid, mu, min_corners)
        pending = np.ones(live.size, dtype=bool)
        for lo_step in range(1, n_steps, _STEP_CHUNK):
            ks = np.arange(lo_step, min(lo_step + _STEP_CHUNK, n_steps))
            t = near[live][:, None] + ks[None, :] * step
            pts = origin + t[..., None] * rays[live][:, None, :]
            v = interpolate(pts.reshape(-1, 3), grid, mu, min_corners).reshape(t.shape)
            v = np.where(t <= far[live][:, None], v, np.nan)
            for c in range(ks.size):
                cross = pending & (prev_v > 0) & (v[:, c] <= 0)
                if cross.any():
                    # linear refinement between the bracketing samples
                    frac = prev_v[cross] / (prev_v[cross] - v[cross, c])
                    t_hit = prev_t[cross] + frac * (t[cross, c] - prev_t[cross])
                    rows = live[cross]
                    depth[rows] = t_hit * (rays[rows] @ candidate.pose.optical_axis)
                    pending &= ~cross
                prev_t, prev_v = t[:, c], v[:, c]
            if not pending.any():
                break

    return DepthFrame(depth.reshape(height, width), intr, candidate.pose, frame_id=-1 - candidate.id)


def simulate_view(
    candidate: ViewCandidate,
    grid: VoxelGrid,
    mu: FloatArray,
    tau: float,
    noise: NoiseModel,
    stride: int = 4,
    max_range: float = 2.0,
    samples_per_ray: int = 5,
    min_corners: int = 4,
) -> ObservationSet:
    frame = expected_depth(candidate, grid, mu, max_range, stride, min_corners)
    if not frame.valid_mask().any():
        raise NoVisibleSurface(f"candidate {candidate.id} sees no zero crossing", candidate=candidate.id)
    hypothetical = sample_ray_observations(
        frame,
        grid,
        tau,
        noise,
        stride=1,
        samples_per_ray=samples_per_ray,
        min_corners=min_corners,
    )
    if hypothetical.is_empty:
        raise NoVisibleSurface(
            f"candidate {candidate.id} yields no usable observations", candidate=candidate.id
        )
    return hypothetical


def candidate_utility(candidate: ViewCandidate, ctx: NbvContext) -> CandidateScore:
    if ctx.omega.size == 0:
        raise InvalidInput("surface band is empty; no utility can be computed")
    try:
        hypothetical = simulate_view(
            candidate,
            ctx.grid,
            ctx.mu,
            ctx.tau,
            ctx.noise,
            stride=ctx.stride,
            max_range=ctx.max_range,
            samples_per_ray=ctx.samples_per_ray,
            min_corners=ctx.min_corners,
        )
    except NoVisibleSurface:
        hypothetical = ObservationSet.empty()

    if hypothetical.is_empty:
        return CandidateScore(id=candidate.id, utility=0.0, raw_utility=0.0, n_observations=0)
    augmented = ctx.op.augmented(hypothetical)
    s_new, _ = estimate_diag_variance(
        augmented,
        k=ctx.k_probes,
        seed=ctx.seed,
        tol=ctx.probe_tol,
        variance_floor=ctx.variance_floor,
        max_iter=ctx.max_iter,
    )
    raw = float(np.sum(ctx.s_hat[ctx.omega] - s_new[ctx.omega]))
    return CandidateScore(
        id=candidate.id,
        utility=max(raw, 0.0),
        raw_utility=raw,
        n_observations=len(hypothetical),
    )


def _score_or_invalid(candidate: ViewCandidate, ctx: NbvContext) -> CandidateScore:
    try:
        return candidate_utility(candidate, ctx)
    except SolverError as e:
        logger.warning(f"candidate {candidate.id} invalid: {e.message}")
        return CandidateScore(
            id=candidate.id, utility=0.0, raw_utility=0.0, n_observations=0, valid=False
        )


def select_best(
    candidates: Sequence[ViewCandidate], ctx: NbvContext, workers: int = 1
) -> NbvReport:
    if len(candidates) == 0:
        raise InvalidInput("no candidate views given")
    scores = ordered_map(lambda c: _score_or_invalid(c, ctx), candidates, workers)
    scores.sort(key=lambda s: s.id)
    valid = [s for s in scores if s.valid]
    if not valid:
        raise AllCandidatesInvalid(f"all {len(scores)} candidates failed")
    # max utility, ties to the lowest id
    best = min(valid, key=lambda s: (-s.utility, s.id))
    best.selected = True
    logger.info(f"NBV: selected candidate {best.id} with utility {best.utility:.4e} m^2")
    return NbvReport(scores=scores, selected_id=best.id, seed=ctx.seed, k_probes=ctx.k_probes)


def fibonacci_candidates(
    center: FloatArray,
    radius: float,
    count: int,
    intrinsics: Intrinsics,
    width: int,
    height: int,
) -> list[ViewCandidate]:
    """Evenly spread views on a sphere around center, all looking at it."""
    if count < 1 or radius <= 0:
        raise InvalidInput("candidate count and radius must be positive")
    center = np.asarray(center, dtype=np.float64)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    out = []
    for i in range(count):
        z = 1.0 - 2.0 * (i + 0.5) / count
        r = math.sqrt(max(0.0, 1.0 - z * z))
        theta = golden * i
        eye = center + radius * np.array([r * math.cos(theta), r * math.sin(theta), z])
        pose = RigidTransform.look_at(eye, center)
        out.append(ViewCandidate(id=i, pose=pose, intrinsics=intrinsics, width=width, height=height))
    return out


def utility_sweep(
    candidate: ViewCandidate,
    contexts: Mapping[float, NbvContext],
    k_values: Sequence[int],
) -> list[dict[str, float]]:
    """Utility of one view per (anchor weight, probe count) pair."""
    rows = []
    for lambda_anchor, ctx in contexts.items():
        for k in k_values:
            probe_ctx = NbvContext.build(
                ctx.grid,
                ctx.mu,
                ctx.op,
                ctx.omega,
                tau=ctx.tau,
                noise=ctx.noise,
                k_probes=int(k),
                seed=ctx.seed,
                probe_tol=ctx.probe_tol,
                variance_floor=ctx.variance_floor,
                stride=ctx.stride,
                max_range=ctx.max_range,
                samples_per_ray=ctx.samples_per_ray,
                min_corners=ctx.min_corners,
                max_iter=ctx.max_iter,
            )
            score = candidate_utility(candidate, probe_ctx)
            rows.append(
                {
                    "lambda_anchor": float(lambda_anchor),
                    "k_probes": int(k),
                    "candidate": candidate.id,
                    "utility": score.utility,
                    "raw_utility": score.raw_utility,
                }
            )
    return rows
