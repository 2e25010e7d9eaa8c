import json
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings

from ..services.observation import NoiseModel
from ..services.posterior import SolverOptions, VarianceOptions
from ..services.prior import AnchorMode
from ..services.voxel_grid import GridConfig, Stencil, WeightScheme


class AppSettings(BaseSettings):
    # Logging
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = Field(
        "INFO", validation_alias="LOG_LEVEL"
    )

    # Default worker count when neither the config nor the CLI sets one
    workers: int = Field(1, ge=1, validation_alias="WORKERS")

    # Where the HTTP surface resolves relative dataset / run directories
    data_dir: Path = Field(Path("data"), validation_alias="DATA_DIR")

    def resolve_data_path(self, path: str | Path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.data_dir / path

    model_config = {
        "env_file": Path(__file__).resolve().parent.parent.parent / ".env",
        "env_file_encoding": "utf-8",
        "case_sensitive": False,
        "extra": "ignore",
    }


settings = AppSettings()  # type:ignore


class _Section(BaseModel):
    model_config = {"extra": "forbid"}


class SceneSection(_Section):
    width: int = Field(160, ge=8, description="depth frame width (pixels)")
    height: int = Field(120, ge=8, description="depth frame height (pixels)")
    fx: float = Field(150.0, gt=0, description="focal length x (pixels)")
    fy: float = Field(150.0, gt=0, description="focal length y (pixels)")
    cx: float = Field(79.5, description="principal point x (pixels)")
    cy: float = Field(59.5, description="principal point y (pixels)")
    camera_radius: float = Field(0.6, gt=0, description="pose hemisphere radius (m)")
    elevations_deg: list[float] = Field(
        [25.0, 45.0, 65.0], min_length=1, description="pose ring elevations (deg)"
    )
    azimuth_count: int = Field(8, ge=1, description="poses per elevation ring")
    sphere_radius: float = Field(0.15, gt=0, description="sphere radius (m)")
    plane_z: float | None = Field(-0.15, description="ground plane height (m); null for no plane")
    noisy: bool = Field(True, description="add depth noise when rendering")
    gt_points: int = Field(50_000, ge=1, description="ground-truth sample count")


class TsdfSection(_Section):
    tau: float | None = Field(
        None, gt=0, description="truncation distance (m); default 4 x voxel_size"
    )
    alpha: float = Field(2.0, ge=1.0, le=3.0, description="band factor")
    max_depth: float = Field(1.5, gt=0, description="ignore depths beyond (m)")


class ObservationSection(_Section):
    stride: int = Field(2, ge=1, description="pixel lattice stride")
    samples_per_ray: int = Field(5, ge=1, description="samples per ray")
    min_corners: int = Field(4, ge=1, le=8, description="stencil minimum")
    max_depth_jump: float | None = Field(
        None, gt=0, description="normal filter depth discontinuity (m); default 2 x tau"
    )


class PriorSection(_Section):
    lambda_smooth: float = Field(1.0, ge=0, description="smoothness weight (1/m^2)")
    lambda_anchor: float = Field(0.25, ge=0, description="anchor weight (1/m^2)")
    stencil: Stencil = Stencil.six
    weight_scheme: WeightScheme = WeightScheme.uniform
    anchor_mode: AnchorMode = AnchorMode.observed


class SurfaceSection(_Section):
    band_epsilon: float | None = Field(
        None, gt=0, description="surface band half width (m); default voxel_size"
    )


class NbvSection(_Section):
    candidate_count: int = Field(16, ge=1)
    candidate_radius: float = Field(0.6, gt=0, description="(m)")
    stride: int = Field(4, ge=1, description="pixel stride of simulated views")
    max_range: float = Field(2.0, gt=0, description="ray marching range (m)")
    candidates_file: Path | None = None
    sweep_k_probes: list[int] = Field(default_factory=list)
    sweep_lambda_anchor: list[float] = Field(default_factory=list)


class EvaluationSection(_Section):
    thresholds_mm: list[float] = Field([20.0, 50.0], min_length=1)
    mesh_samples: int = Field(100_000, ge=1)

    @field_validator("thresholds_mm")
    @classmethod
    def _positive(cls, v: list[float]) -> list[float]:
        if any(t <= 0 for t in v):
            raise ValueError("thresholds must be > 0")
        return v


class PipelineConfig(_Section):
    seed: int = Field(0, ge=0)
    workers: int = Field(default_factory=lambda: settings.workers, ge=1)
    scene: SceneSection = Field(default_factory=SceneSection)
    grid: GridConfig = Field(default_factory=GridConfig)
    tsdf: TsdfSection = Field(default_factory=TsdfSection)
    noise: NoiseModel = Field(default_factory=NoiseModel)
    observation: ObservationSection = Field(default_factory=ObservationSection)
    prior: PriorSection = Field(default_factory=PriorSection)
    solver: SolverOptions = Field(default_factory=SolverOptions)
    variance: VarianceOptions = Field(default_factory=VarianceOptions)
    surface: SurfaceSection = Field(default_factory=SurfaceSection)
    nbv: NbvSection = Field(default_factory=NbvSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)

    @model_validator(mode="after")
    def _resolve_defaults(self) -> "PipelineConfig":
        if self.tsdf.tau is None:
            self.tsdf.tau = 4.0 * self.grid.voxel_size
        if self.surface.band_epsilon is None:
            self.surface.band_epsilon = self.grid.voxel_size
        if self.observation.max_depth_jump is None:
            self.observation.max_depth_jump = 2.0 * self.tsdf.tau
        return self

    @property
    def tau(self) -> float:
        assert self.tsdf.tau is not None
        return self.tsdf.tau

    @property
    def anchored(self) -> bool:
        return self.prior.lambda_anchor > 0

    @classmethod
    def load(cls, path: Path) -> "PipelineConfig":
        return cls.model_validate_json(path.read_text(encoding="utf-8"))

    def with_overrides(self, **overrides: Any) -> "PipelineConfig":
        # dotted keys, e.g. {"prior.lambda_anchor": 0.0}
        data = self.model_dump(mode="json")
        for dotted, value in overrides.items():
            if value is None:
                continue
            node = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                node = node[key]
            node[leaf] = value
        return type(self).model_validate(data)

    def dump(self, path: Path) -> None:
        path.write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")

    @classmethod
    def json_schema_text(cls) -> str:
        return json.dumps(cls.model_json_schema(), indent=2)
