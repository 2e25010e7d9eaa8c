import csv

import numpy as np
import pytest

from app.core.errors import StorageError
from app.services import pipeline
from app.services import posterior as posterior_module
from app.services.nbv import ViewCandidate, select_best
from app.services.observation import Intrinsics
from app.services.sparse_linalg import SolveStats
from app.storage import load_dataset, read_ply, read_volume
from app.storage.frames import Dataset


@pytest.fixture(scope="module")
def dataset(tiny_config, tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    pipeline.synthesize(tiny_config, root)
    return load_dataset(root)


@pytest.fixture(scope="module")
def run_dir(tiny_config, dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    result = pipeline.run(tiny_config, dataset, out)
    return out, result


def test_synthesized_dataset(tiny_config, dataset):
    assert len(dataset.frames) == 6
    assert dataset.frames[0].depth.shape == (36, 48)
    assert all(f.valid_mask().any() for f in dataset.frames)
    assert dataset.gt_points.shape == (2000, 3)
    assert dataset.scene == pipeline.scene_from_config(tiny_config)


def test_run_writes_all_outputs(run_dir):
    out, _ = run_dir
    for name in [
        "config.json",
        "volume.sdfvol",
        "state.npz",
        "tsdf_mesh.ply",
        "bayes_mesh.ply",
        "metrics.csv",
        "metrics.txt",
        "timing.log",
    ]:
        assert (out / name).exists(), name
    stages = [line.split()[0] for line in (out / "timing.log").read_text().splitlines()]
    assert stages[0] == "tsdf_bootstrap"
    assert stages[-1] == "total"


def test_run_reports_both_methods(run_dir):
    out, result = run_dir
    assert list(result.reports) == ["tsdf_bootstrap", "bayes_anchor"]
    with open(out / "metrics.csv", newline="") as f:
        rows = {r["method"]: r for r in csv.DictReader(f)}
    for row in rows.values():
        assert float(row["CD"]) > 0
        assert 0.0 <= float(row["F@50"]) <= 1.0


def test_stored_volume_matches_fit(tiny_config, run_dir):
    out, result = run_dir
    stored = read_volume(out / "volume.sdfvol")
    fit = result.fit
    assert stored.grid.n_active == fit.grid.n_active
    assert stored.tau == tiny_config.tau
    assert stored.metadata["seed"] == 3
    assert stored.metadata["converged"] is True
    assert stored.metadata["k_probes"] == stored.metadata["k_requested"] == 4
    assert set(stored.channels) == {"mu", "s_hat", "tsdf", "anchor"}
    np.testing.assert_allclose(stored.channels["mu"], fit.posterior.mu, rtol=1e-6, atol=1e-9)
    assert np.all(stored.channels["s_hat"] > 0)


def test_bayes_mesh_has_vertex_variance(run_dir):
    out, result = run_dir
    mesh = read_ply(out / "bayes_mesh.ply")
    assert mesh.n_triangles == result.bayes_mesh.n_triangles > 0
    assert mesh.vertex_variance is not None
    assert np.all(mesh.vertex_variance > 0)


def test_bayes_surface_is_near_the_sphere(tiny_config, run_dir):
    _, result = run_dir
    radial = np.linalg.norm(result.bayes_mesh.vertices, axis=1)
    # most of the surface is seen; vertices stay within a voxel of the sphere
    assert np.median(np.abs(radial - tiny_config.scene.sphere_radius)) < tiny_config.grid.voxel_size


def test_run_without_ground_truth(tiny_config, dataset, tmp_path):
    result = pipeline.run(tiny_config, Dataset(frames=dataset.frames), tmp_path)
    assert result.reports == {}
    assert not (tmp_path / "metrics.csv").exists()
    assert (tmp_path / "bayes_mesh.ply").exists()


@pytest.mark.slow
def test_worker_count_does_not_change_outputs(tiny_config, dataset, tmp_path):
    for workers in (1, 3):
        pipeline.run(tiny_config.with_overrides(workers=workers), dataset, tmp_path / str(workers))
    for name in ["metrics.csv", "volume.sdfvol", "bayes_mesh.ply"]:
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "3" / name).read_bytes(), name


@pytest.mark.slow
def test_plan_next_view_from_run_directory(tiny_config, run_dir, tmp_path):
    out, result = run_dir
    report, sweep = pipeline.plan_next_view(tiny_config, out, tmp_path)
    assert sweep == []
    with open(tmp_path / "nbv.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["candidate"]) for r in rows] == [0, 1, 2]
    assert sum(int(r["selected"]) for r in rows) == 1
    assert report.selected.utility >= max(s.utility for s in report.scores)

    f = result.fit
    ctx = pipeline.nbv_context(tiny_config, f.grid, f.op, f.posterior.mu, f.posterior.s_hat)
    in_process = select_best(pipeline.nbv_candidates(tiny_config, f.grid, ctx), ctx)
    assert in_process.selected_id == report.selected_id
    assert [s.id for s in in_process.scores] == [s.id for s in report.scores]
    for a, b in zip(in_process.scores, report.scores):
        assert b.raw_utility == pytest.approx(a.raw_utility, rel=1e-12, abs=1e-15)
        assert b.n_observations == a.n_observations

@pytest.mark.slow
def test_run_without_anchor(tiny_config, dataset, tmp_path):
    config = tiny_config.with_overrides(**{"prior.lambda_anchor": 0.0})
    result = pipeline.run(config, dataset, tmp_path)
    assert list(result.reports) == ["tsdf_bootstrap", "bayes_no_anchor"]
    assert not result.fit.prior.anchor_mask.any()


def test_restored_run_rebuilds_the_fitted_system(tiny_config, run_dir):
    out, result = run_dir
    f = result.fit
    restored = pipeline.restore_run(tiny_config, out)
    np.testing.assert_array_equal(restored.grid.coords, f.grid.coords)
    assert (restored.op.q0 != f.op.q0).nnz == 0
    np.testing.assert_array_equal(restored.prior.b0, f.prior.b0)
    np.testing.assert_array_equal(restored.prior.anchor_mask, f.prior.anchor_mask)
    np.testing.assert_array_equal(restored.observations.y, f.observations.y)
    np.testing.assert_array_equal(restored.mu, f.posterior.mu)


def test_restore_needs_the_posterior_state(tiny_config, run_dir, tmp_path):
    out, _ = run_dir
    (tmp_path / "volume.sdfvol").write_bytes((out / "volume.sdfvol").read_bytes())
    with pytest.raises(StorageError) as info:
        pipeline.restore_run(tiny_config, tmp_path)
    assert info.value.path == str(tmp_path / "state.npz")


def test_unwritable_output_is_a_storage_error(tiny_config, dataset, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(StorageError):
        pipeline.run(tiny_config, dataset, blocker / "run")
    with pytest.raises(StorageError):
        pipeline.synthesize(tiny_config, blocker)


def test_dropped_variance_solve_is_reported(tiny_config, dataset, tmp_path, monkeypatch):
    solve = posterior_module._probe_product

    def first_solve_fails(op, seed, k, tol, max_iter):
        if k == 0:
            return None, SolveStats(1, 1.0, False)
        return solve(op, seed, k, tol, max_iter)

    monkeypatch.setattr(posterior_module, "_probe_product", first_solve_fails)
    result = pipeline.run(tiny_config, dataset, tmp_path)
    assert not result.converged
    assert result.fit.posterior.probes_used == tiny_config.variance.k_probes - 1
    stored = read_volume(tmp_path / "volume.sdfvol")
    assert stored.metadata["converged"] is False
    assert stored.metadata["k_probes"] == 3


def _hemisphere_ranking(config, dataset):
    """Scores of Fibonacci candidates plus a copy of the first captured view."""
    f = pipeline.fit(config, dataset.frames)
    ctx = pipeline.nbv_context(config, f.grid, f.op, f.posterior.mu, f.posterior.s_hat)
    candidates = pipeline.nbv_candidates(config, f.grid, ctx)
    sc = config.scene
    duplicate = ViewCandidate(
        id=len(candidates),
        pose=dataset.frames[0].pose,
        intrinsics=Intrinsics(fx=sc.fx, fy=sc.fy, cx=sc.cx, cy=sc.cy),
        width=sc.width,
        height=sc.height,
    )
    report = select_best([*candidates, duplicate], ctx)
    chosen = next(c for c in candidates + [duplicate] if c.id == report.selected_id)
    return report, chosen, duplicate


HEMISPHERE_NBV = {"nbv.candidate_count": 8, "variance.k_probes": 16}


@pytest.mark.slow
def test_next_view_looks_from_below(tiny_config, dataset):
    config = tiny_config.with_overrides(**HEMISPHERE_NBV)
    report, chosen, duplicate = _hemisphere_ranking(config, dataset)
    # every captured view sits above the sphere
    assert all(frame.pose.camera_center[2] > 0 for frame in dataset.frames)
    assert chosen.pose.camera_center[2] < 0
    by_id = {s.id: s for s in report.scores}
    assert by_id[duplicate.id].utility < report.selected.utility


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_next_view_looks_from_below_for_every_seed(tiny_config, seed):
    config = tiny_config.with_overrides(seed=seed, **HEMISPHERE_NBV)
    dataset = pipeline.synthesize(config)
    report, chosen, duplicate = _hemisphere_ranking(config, dataset)
    assert chosen.pose.camera_center[2] < 0
    assert {s.id: s for s in report.scores}[duplicate.id].utility < report.selected.utility
