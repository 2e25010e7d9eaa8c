import json

import pytest
from pydantic import ValidationError

from app.core.config import AppSettings, PipelineConfig
from app.services.voxel_grid import GridConfig


def test_derived_defaults():
    cfg = PipelineConfig()
    assert cfg.grid.voxel_size == 0.005
    assert cfg.tau == pytest.approx(0.02)
    assert cfg.surface.band_epsilon == pytest.approx(0.005)
    assert cfg.observation.max_depth_jump == pytest.approx(0.04)
    assert cfg.anchored


def test_derived_defaults_follow_voxel_size():
    cfg = PipelineConfig.model_validate({"grid": {"voxel_size": 0.01}})
    assert cfg.tau == pytest.approx(0.04)
    assert cfg.observation.max_depth_jump == pytest.approx(0.08)


def test_explicit_tau_is_kept():
    cfg = PipelineConfig.model_validate({"tsdf": {"tau": 0.03}})
    assert cfg.tau == 0.03
    assert cfg.observation.max_depth_jump == pytest.approx(0.06)


def test_unknown_keys_are_rejected():
    with pytest.raises(ValidationError):
        PipelineConfig.model_validate({"prior": {"lambda": 1.0}})
    with pytest.raises(ValidationError):
        PipelineConfig.model_validate({"colour": "red"})


@pytest.mark.parametrize(
    "data",
    [
        {"grid": {"block_size": 6}},
        {"grid": {"voxel_size": 0.0}},
        {"tsdf": {"alpha": 4.0}},
        {"evaluation": {"thresholds_mm": [20.0, -1.0]}},
        {"observation": {"min_corners": 9}},
    ],
)
def test_invalid_values(data):
    with pytest.raises(ValidationError):
        PipelineConfig.model_validate(data)


def test_overrides_use_dotted_keys():
    cfg = PipelineConfig().with_overrides(
        **{"prior.lambda_anchor": 0.0, "seed": 11, "workers": None}
    )
    assert cfg.prior.lambda_anchor == 0.0
    assert not cfg.anchored
    assert cfg.seed == 11
    assert cfg.workers == PipelineConfig().workers


def test_dump_and_load(tmp_path):
    cfg = PipelineConfig.model_validate({"seed": 5, "scene": {"plane_z": None}})
    cfg.dump(tmp_path / "config.json")
    loaded = PipelineConfig.load(tmp_path / "config.json")
    assert loaded == cfg
    assert loaded.scene.plane_z is None
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 5


def test_json_schema_lists_sections():
    schema = json.loads(PipelineConfig.json_schema_text())
    assert {"grid", "prior", "solver", "variance", "nbv"} <= set(schema["properties"])


def test_grid_config_is_frozen():
    with pytest.raises(ValidationError):
        GridConfig().voxel_size = 0.1


def test_settings_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("WORKERS", "3")
    monkeypatch.setenv("DATA_DIR", str(tmp_path))
    s = AppSettings()  # type:ignore
    assert s.workers == 3
    assert s.resolve_data_path("runs/a") == tmp_path / "runs" / "a"
    assert s.resolve_data_path(tmp_path / "x") == tmp_path / "x"
