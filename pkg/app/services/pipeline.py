import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..core.config import PipelineConfig
from ..core.errors import InvalidInput, StorageError
from ..storage import frames as frame_store
from ..storage.frames import Dataset
from ..storage.paths import prepare_output, storage_errors
from ..storage.ply import read_ply, write_mesh
from ..storage.reports import write_metrics, write_rows
from ..storage.state import read_state, write_state
from ..storage.volume import read_volume, write_volume
from ..types.arrays import BoolArray, FloatArray, Points
from ..utils.parallel import ordered_map
from ..utils.time import StageTimer
from .evaluation import MetricsReport, evaluate
from .nbv import NbvContext, NbvReport, ViewCandidate, fibonacci_candidates, select_best, utility_sweep
from .observation import DepthFrame, Intrinsics, ObservationSet, sample_ray_observations
from .posterior import Posterior, infer_posterior, solve_map, surface_band_indices, undetermined_nodes
from .prior import PriorSpec, PriorSystem, assemble_prior
from .scene import (
    AnalyticScene,
    canonical_poses,
    canonical_scene,
    render_depth,
    sample_ground_truth,
)
from .sparse_linalg import PrecisionOperator
from .surface import TriangleMesh, extract_field_mesh, marching_cubes, sample_mesh_points
from .tsdf import TsdfVolume, bootstrap
from .voxel_grid import VoxelGrid, activate_narrow_band

logger = logging.getLogger(__name__)


@dataclass
class Fit:
    tsdf: TsdfVolume
    grid: VoxelGrid
    observations: ObservationSet
    prior: PriorSystem
    op: PrecisionOperator
    posterior: Posterior
    pruned: int = 0


@dataclass
class RunResult:
    fit: Fit
    bayes_mesh: TriangleMesh
    tsdf_mesh: TriangleMesh
    reports: dict[str, MetricsReport] = field(default_factory=dict)
    timer: StageTimer = field(default_factory=StageTimer)

    @property
    def converged(self) -> bool:
        return self.fit.posterior.converged


def method_name(config: PipelineConfig) -> str:
    return "bayes_anchor" if config.anchored else "bayes_no_anchor"


# --- synth -------------------------------------------------------------------


def scene_from_config(config: PipelineConfig) -> AnalyticScene:
    return canonical_scene(config.scene.sphere_radius, config.scene.plane_z)


def synthesize(config: PipelineConfig, out_dir: Path | None = None) -> Dataset:
    if out_dir is not None:
        prepare_output(out_dir)
    sc = config.scene
    scene = scene_from_config(config)
    intrinsics = Intrinsics(fx=sc.fx, fy=sc.fy, cx=sc.cx, cy=sc.cy)
    poses = canonical_poses(sc.camera_radius, tuple(sc.elevations_deg), sc.azimuth_count)
    noise = config.noise if sc.noisy else None

    def render(item: tuple[int, object]) -> DepthFrame:
        frame_id, pose = item
        return render_depth(
            scene,
            pose,
            intrinsics,
            sc.width,
            sc.height,
            noise=noise,
            seed=[config.seed, frame_id],
            frame_id=frame_id,
        )

    frames = ordered_map(render, list(enumerate(poses)), config.workers)
    gt_points = sample_ground_truth(scene, sc.gt_points, seed=config.seed)
    logger.info(f"synthesized {len(frames)} frames and {len(gt_points)} ground-truth points")
    dataset = Dataset(frames=frames, gt_points=gt_points, scene=scene)
    if out_dir is not None:
        with storage_errors(out_dir):
            frame_store.save_dataset(out_dir, frames, gt_points, scene)
    return dataset


# --- run ---------------------------------------------------------------------


def collect_observations(
    config: PipelineConfig, frames: list[DepthFrame], grid: VoxelGrid
) -> ObservationSet:
    obs_cfg = config.observation

    def per_frame(frame: DepthFrame) -> ObservationSet:
        return sample_ray_observations(
            frame.with_max_depth(config.tsdf.max_depth),
            grid,
            config.tau,
            config.noise,
            stride=obs_cfg.stride,
            samples_per_ray=obs_cfg.samples_per_ray,
            min_corners=obs_cfg.min_corners,
            max_depth_jump=obs_cfg.max_depth_jump,
        )

    observations = ObservationSet.concatenate(ordered_map(per_frame, frames, config.workers))
    observations.validate(grid.n_active, config.tau)
    logger.info(f"{len(observations)} observations from {len(frames)} frames")
    return observations


def prior_spec(config: PipelineConfig) -> PriorSpec:
    p = config.prior
    return PriorSpec(
        lambda_smooth=p.lambda_smooth,
        lambda_anchor=p.lambda_anchor,
        stencil=p.stencil,
        weight_scheme=p.weight_scheme,
        anchor_mode=p.anchor_mode,
    )


def _subset_spec(spec: PriorSpec, keep: BoolArray) -> PriorSpec:
    per_node = {
        name: getattr(spec, name)[keep]
        for name in ("anchor_set", "anchor_values", "anchor_observed")
        if getattr(spec, name) is not None
    }
    return replace(spec, **per_node)


def prune_undetermined(
    grid: VoxelGrid,
    observations: ObservationSet,
    prior: PriorSystem,
    tsdf: TsdfVolume | None,
    spec: PriorSpec,
) -> tuple[VoxelGrid, ObservationSet, PriorSystem, int]:
    """Drop band components that neither an anchor nor an observation pins down."""
    loose = undetermined_nodes(prior.q0, observations, prior.anchor_mask)
    if not loose.any():
        return grid, observations, prior, 0
    keep = ~loose
    new_index = np.where(keep, np.cumsum(keep) - 1, -1)
    grid = grid.subset(keep)
    observations = observations.remap(new_index)
    prior = assemble_prior(grid, tsdf, _subset_spec(spec, keep))
    logger.info(f"pruned {int(loose.sum())} undetermined band nodes")
    return grid, observations, prior, int(loose.sum())


def fit(config: PipelineConfig, frames: list[DepthFrame], timer: StageTimer | None = None) -> Fit:
    timer = timer or StageTimer()
    with timer.stage("tsdf_bootstrap"):
        tsdf = bootstrap(frames, config.grid, config.tau, config.tsdf.max_depth)
    with timer.stage("band"):
        grid = activate_narrow_band(tsdf, config.tsdf.alpha)
    with timer.stage("observations"):
        observations = collect_observations(config, frames, grid)
    with timer.stage("prior"):
        spec = prior_spec(config)
        prior = assemble_prior(grid, tsdf, spec)
        pruned = 0
        if prior.unanchored_components:
            grid, observations, prior, pruned = prune_undetermined(
                grid, observations, prior, tsdf, spec
            )
    with timer.stage("posterior"):
        op = PrecisionOperator(prior.q0, observations)
        posterior = infer_posterior(
            op,
            prior.b0,
            variance=config.variance,
            solver=config.solver,
            seed=config.seed,
            workers=config.workers,
            anchor_mask=prior.anchor_mask,
        )
    return Fit(tsdf, grid, observations, prior, op, posterior, pruned)


def crop(points: Points, scene: AnalyticScene | None) -> Points:
    if scene is None:
        return points
    kept = points[scene.inside_bounds(points)]
    if kept.shape[0] == 0:
        raise InvalidInput("no predicted surface point lies inside the scene bounds")
    return kept


def evaluate_mesh(
    config: PipelineConfig, mesh: TriangleMesh, gt_points: Points, scene: AnalyticScene | None
) -> MetricsReport:
    predicted = sample_mesh_points(mesh, config.evaluation.mesh_samples, seed=config.seed)
    return evaluate(
        crop(predicted, scene),
        crop(gt_points, scene),
        config.evaluation.thresholds_mm,
        workers=config.workers,
    )


def run(config: PipelineConfig, dataset: Dataset, out_dir: Path | None = None) -> RunResult:
    if out_dir is not None:
        prepare_output(out_dir)
    timer = StageTimer()
    result_fit = fit(config, dataset.frames, timer)
    grid, posterior = result_fit.grid, result_fit.posterior

    with timer.stage("surface"):
        bayes_mesh = marching_cubes(grid, posterior.mu, posterior.s_hat, tau=config.tau)
        tsdf_mesh = extract_field_mesh(result_fit.tsdf)

    result = RunResult(result_fit, bayes_mesh, tsdf_mesh, timer=timer)
    if dataset.gt_points is not None:
        with timer.stage("evaluation"):
            result.reports["tsdf_bootstrap"] = evaluate_mesh(
                config, tsdf_mesh, dataset.gt_points, dataset.scene
            )
            result.reports[method_name(config)] = evaluate_mesh(
                config, bayes_mesh, dataset.gt_points, dataset.scene
            )

    if out_dir is not None:
        save_run(config, result, out_dir)
    return result


def save_run(config: PipelineConfig, result: RunResult, out_dir: Path) -> None:
    prepare_output(out_dir)
    f = result.fit
    tsdf_values, tsdf_weights = f.tsdf.lookup(f.grid.coords)
    with storage_errors(out_dir):
        config.dump(out_dir / "config.json")
        write_volume(
            out_dir / "volume.sdfvol",
            f.grid,
            config.tau,
            {
                "mu": f.posterior.mu,
                "s_hat": f.posterior.s_hat,
                "tsdf": tsdf_values,
                "anchor": f.prior.anchor_mask.astype(np.float64),
            },
            {
                "seed": f.posterior.seed,
                "k_probes": f.posterior.probes_used,
                "k_requested": config.variance.k_probes,
                "converged": f.posterior.converged,
                "lambda_smooth": config.prior.lambda_smooth,
                "lambda_anchor": config.prior.lambda_anchor,
                "observations": len(f.observations),
                "pruned": f.pruned,
            },
        )
        write_state(
            out_dir / "state.npz",
            f.observations,
            anchor_values=f.prior.anchor_values,
            anchor_observed=tsdf_weights > 0,
        )
        write_mesh(out_dir / "tsdf_mesh.ply", result.tsdf_mesh)
        write_mesh(out_dir / "bayes_mesh.ply", result.bayes_mesh)
        if result.reports:
            write_metrics(out_dir, result.reports)
        result.timer.write(out_dir / "timing.log")
    logger.info(f"run written to {out_dir}")


@dataclass
class RestoredRun:
    """Posterior system of a finished run, rebuilt from its output directory."""

    grid: VoxelGrid
    observations: ObservationSet
    prior: PriorSystem
    op: PrecisionOperator
    mu: FloatArray
    pruned: int = 0


def restore_run(config: PipelineConfig, run_dir: Path) -> RestoredRun:
    """Rebuild Q, b0 and the MAP field from volume.sdfvol and state.npz.

    With the run's own configuration the result matches the in-process fit bitwise;
    a different prior (e.g. another lambda_anchor) is applied to the stored band.
    """
    stored = read_volume(run_dir / "volume.sdfvol")
    observations, nodes = read_state(run_dir / "state.npz")
    grid = stored.grid
    n = grid.n_active
    for name, values in nodes.items():
        if values.shape != (n,):
            raise StorageError(
                f"posterior state {name} has shape {values.shape}, volume has {n} nodes",
                path=str(run_dir / "state.npz"),
            )
    if observations.cols.size and int(observations.cols.max()) >= n:
        raise StorageError(
            "posterior state references nodes outside the volume", path=str(run_dir / "state.npz")
        )

    spec = replace(
        prior_spec(config),
        anchor_values=nodes["anchor_values"],
        anchor_observed=nodes["anchor_observed"],
    )
    prior = assemble_prior(grid, None, spec)
    pruned = 0
    if prior.unanchored_components:
        grid, observations, prior, pruned = prune_undetermined(grid, observations, prior, None, spec)
    op = PrecisionOperator(prior.q0, observations)
    mu, _ = solve_map(op, prior.b0, config.solver, prior.anchor_mask)
    logger.info(f"restored run {run_dir}: N={op.n}, M={len(observations)}")
    return RestoredRun(grid, observations, prior, op, mu, pruned)


# --- nbv ---------------------------------------------------------------------


def nbv_context(
    config: PipelineConfig,
    grid: VoxelGrid,
    op: PrecisionOperator,
    mu: FloatArray,
    s_hat: FloatArray | None = None,
) -> NbvContext:
    """Candidate-scoring state; the baseline variance is recomputed when s_hat is None."""
    options = dict(
        tau=config.tau,
        noise=config.noise,
        k_probes=config.variance.k_probes,
        seed=config.seed,
        probe_tol=config.variance.probe_tol,
        variance_floor=config.variance.variance_floor,
        stride=config.nbv.stride,
        max_range=config.nbv.max_range,
        samples_per_ray=config.observation.samples_per_ray,
        min_corners=config.observation.min_corners,
        max_iter=config.solver.max_iter,
    )
    omega = surface_band_indices(mu, config.surface.band_epsilon)
    if s_hat is None:
        return NbvContext.build(grid, mu, op, omega, **options)
    return NbvContext(grid=grid, mu=mu, op=op, s_hat=s_hat, omega=omega, **options)


def nbv_candidates(config: PipelineConfig, grid: VoxelGrid, ctx: NbvContext) -> list[ViewCandidate]:
    sc = config.scene
    intrinsics = Intrinsics(fx=sc.fx, fy=sc.fy, cx=sc.cx, cy=sc.cy)
    if config.nbv.candidates_file is not None:
        poses = frame_store.read_poses(config.nbv.candidates_file)
        return [
            ViewCandidate(id=i, pose=pose, intrinsics=intrinsics, width=sc.width, height=sc.height)
            for i, pose in sorted(poses.items())
        ]
    positions = grid.positions()
    center = positions[ctx.omega].mean(axis=0) if ctx.omega.size else positions.mean(axis=0)
    return fibonacci_candidates(
        center, config.nbv.candidate_radius, config.nbv.candidate_count, intrinsics, sc.width, sc.height
    )


def plan_next_view(
    config: PipelineConfig, run_dir: Path, out_dir: Path | None = None
) -> tuple[NbvReport, list[dict]]:
    """Score candidate views against the posterior stored in a run directory."""
    if out_dir is not None:
        prepare_output(out_dir)
    timer = StageTimer()
    with timer.stage("restore"):
        restored = restore_run(config, run_dir)
    with timer.stage("nbv"):
        ctx = nbv_context(config, restored.grid, restored.op, restored.mu)
        candidates = nbv_candidates(config, restored.grid, ctx)
        report = select_best(candidates, ctx, workers=config.workers)

    sweep_rows: list[dict] = []
    if config.nbv.sweep_k_probes or config.nbv.sweep_lambda_anchor:
        with timer.stage("nbv_sweep"):
            chosen = next(c for c in candidates if c.id == report.selected_id)
            contexts = {config.prior.lambda_anchor: ctx}
            for lam in config.nbv.sweep_lambda_anchor:
                if lam == config.prior.lambda_anchor:
                    continue
                variant = config.with_overrides(**{"prior.lambda_anchor": lam})
                other = restore_run(variant, run_dir)
                contexts[lam] = nbv_context(variant, other.grid, other.op, other.mu)
            k_values = config.nbv.sweep_k_probes or [config.variance.k_probes]
            sweep_rows = utility_sweep(chosen, contexts, k_values)

    if out_dir is not None:
        with storage_errors(out_dir):
            config.dump(out_dir / "config.json")
            write_rows(
                out_dir / "nbv.csv",
                [
                    {
                        "candidate": s.id,
                        "utility": s.utility,
                        "raw_utility": s.raw_utility,
                        "n_observations": s.n_observations,
                        "valid": int(s.valid),
                        "selected": int(s.selected),
                    }
                    for s in report.scores
                ],
            )
            if sweep_rows:
                write_rows(out_dir / "nbv_sweep.csv", sweep_rows)
            timer.write(out_dir / "timing.log")
    return report, sweep_rows


# --- eval --------------------------------------------------------------------


def load_points(path: Path, count: int, seed: int) -> Points:
    """Point samples from a PLY: its vertices, or area-weighted samples when it has faces."""
    mesh = read_ply(path)
    if mesh.n_triangles:
        return sample_mesh_points(mesh, count, seed)
    return mesh.vertices


def evaluate_files(
    config: PipelineConfig,
    predicted: Path,
    ground_truth: Path,
    out_dir: Path | None = None,
    scene: AnalyticScene | None = None,
) -> MetricsReport:
    if out_dir is not None:
        prepare_output(out_dir)
    p = load_points(predicted, config.evaluation.mesh_samples, config.seed)
    g = load_points(ground_truth, config.evaluation.mesh_samples, config.seed)
    report = evaluate(
        crop(p, scene), crop(g, scene), config.evaluation.thresholds_mm, workers=config.workers
    )
    if out_dir is not None:
        with storage_errors(out_dir):
            write_metrics(out_dir, {predicted.stem: report})
    return report
