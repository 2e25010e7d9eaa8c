import json

import numpy as np
import pytest
from typer.testing import CliRunner

from app.cli import cli
from app.services import pipeline
from app.services import posterior as posterior_module
from app.services.sparse_linalg import SolveStats
from app.storage import read_volume, write_ply
from app.storage.frames import read_pfm

runner = CliRunner()


@pytest.fixture(scope="module")
def workspace(tiny_config, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    pipeline.synthesize(tiny_config, root / "dataset")
    tiny_config.dump(root / "config.json")
    blocker = root / "blocker"
    blocker.write_text("")
    return root


def storage_failure(result) -> bool:
    return result.exit_code == 4 and '"error": "StorageError"' in result.output


def test_schema_prints_json():
    result = runner.invoke(cli, ["schema"])
    assert result.exit_code == 0
    assert "properties" in json.loads(result.stdout)


def test_unknown_config_key_exits_with_config_code(tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"prior": {"lambda": 1.0}}))
    result = runner.invoke(cli, ["run", str(tmp_path), "--out", str(tmp_path / "o"), "-c", str(config)])
    assert result.exit_code == 2


def test_missing_config_file(tmp_path):
    result = runner.invoke(cli, ["synth", "--out", str(tmp_path), "-c", str(tmp_path / "none.json")])
    assert result.exit_code == 2


def test_missing_dataset_exits_with_storage_code(tmp_path):
    result = runner.invoke(cli, ["run", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert result.exit_code == 4


def test_eval_point_files(tmp_path):
    write_ply(tmp_path / "pred.ply", np.zeros((1, 3)))
    write_ply(tmp_path / "gt.ply", np.array([[1.0, 0.0, 0.0]]))
    result = runner.invoke(
        cli, ["eval", str(tmp_path / "pred.ply"), str(tmp_path / "gt.ply"), "--out", str(tmp_path / "m")]
    )
    assert result.exit_code == 0
    assert result.stdout.startswith("CD 2,")
    assert (tmp_path / "m" / "metrics.csv").read_text().splitlines()[1].startswith("pred,2,")


def test_eval_empty_point_file(tmp_path):
    write_ply(tmp_path / "pred.ply", np.empty((0, 3)))
    write_ply(tmp_path / "gt.ply", np.zeros((1, 3)))
    result = runner.invoke(
        cli, ["eval", str(tmp_path / "pred.ply"), str(tmp_path / "gt.ply"), "--out", str(tmp_path / "m")]
    )
    assert result.exit_code == 2


def test_synth_into_unwritable_directory(workspace):
    result = runner.invoke(cli, ["synth", "--out", str(workspace / "blocker" / "sub")])
    assert storage_failure(result)


def test_run_into_unwritable_directory(workspace):
    result = runner.invoke(
        cli,
        [
            "run",
            str(workspace / "dataset"),
            "--out",
            str(workspace / "blocker" / "sub"),
            "-c",
            str(workspace / "config.json"),
        ],
    )
    assert storage_failure(result)


def test_nbv_into_unwritable_directory(workspace, tmp_path):
    (tmp_path / "config.json").write_text((workspace / "config.json").read_text())
    result = runner.invoke(cli, ["nbv", str(tmp_path), "--out", str(workspace / "blocker" / "sub")])
    assert storage_failure(result)


def test_eval_into_unwritable_directory(workspace, tmp_path):
    write_ply(tmp_path / "pred.ply", np.zeros((1, 3)))
    write_ply(tmp_path / "gt.ply", np.zeros((1, 3)))
    result = runner.invoke(
        cli,
        ["eval", str(tmp_path / "pred.ply"), str(tmp_path / "gt.ply"), "--out", str(workspace / "blocker" / "sub")],
    )
    assert storage_failure(result)


def test_nbv_needs_a_run_directory(workspace):
    result = runner.invoke(cli, ["nbv", str(workspace / "dataset"), "--out", str(workspace / "n")])
    assert storage_failure(result)


def test_run_with_dropped_variance_solve_exits_with_solver_code(workspace, tmp_path, monkeypatch):
    solve = posterior_module._probe_product

    def first_solve_fails(op, seed, k, tol, max_iter):
        if k == 0:
            return None, SolveStats(1, 1.0, False)
        return solve(op, seed, k, tol, max_iter)

    monkeypatch.setattr(posterior_module, "_probe_product", first_solve_fails)
    out = tmp_path / "run"
    result = runner.invoke(
        cli, ["run", str(workspace / "dataset"), "--out", str(out), "-c", str(workspace / "config.json")]
    )
    assert result.exit_code == 3
    assert '"error": "NotConverged"' in result.output
    assert "bayes_anchor: CD" in result.output
    assert (out / "bayes_mesh.ply").exists()
    assert read_volume(out / "volume.sdfvol").metadata["converged"] is False


@pytest.mark.slow
def test_run_then_nbv_from_its_directory(workspace, tmp_path):
    run_dir = tmp_path / "run"
    result = runner.invoke(
        cli, ["run", str(workspace / "dataset"), "--out", str(run_dir), "-c", str(workspace / "config.json")]
    )
    assert result.exit_code == 0
    result = runner.invoke(cli, ["nbv", str(run_dir), "--out", str(tmp_path / "nbv")])
    assert result.exit_code == 0
    assert "selected view " in result.output
    assert (tmp_path / "nbv" / "nbv.csv").exists()


def test_synth_is_reproducible(workspace, tiny_config, tmp_path):
    config = str(workspace / "config.json")
    for name in ("a", "b"):
        result = runner.invoke(cli, ["synth", "--out", str(tmp_path / name), "-c", config])
        assert result.exit_code == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert len(files) > 3
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    rendered = pipeline.synthesize(tiny_config).frames[0]
    on_disk = read_pfm(tmp_path / "a" / "frames" / "frame_0000.pfm")
    np.testing.assert_array_equal(on_disk, rendered.depth.astype(np.float32))
