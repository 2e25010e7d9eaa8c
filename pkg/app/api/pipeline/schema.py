from typing import Literal

from ...core.config import PipelineConfig
from ..global_schema import BaseModel


# Schema for POST /pipeline/runs
class PipelineRunRequest(BaseModel):
    out: str
    stage: Literal["run", "nbv"] = "run"
    # dataset directory for "run", finished run directory for "nbv"
    dataset: str | None = None
    run_dir: str | None = None
    config: PipelineConfig | None = None
    no_anchor: bool = False


class PipelineRunData(BaseModel):
    out_dir: str
    metrics: dict[str, dict[str, float]] = {}
    converged: bool | None = None
    selected_view: int | None = None
    utility: float | None = None
