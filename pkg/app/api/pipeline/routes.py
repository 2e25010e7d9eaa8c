import logging

from fastapi import APIRouter

from ...core.config import PipelineConfig
from ...core.errors import InvalidInput
from ...services import pipeline
from ...storage.frames import load_dataset
from ..dependencies import Settings
from ..global_schema import ApiResponse
from .schema import PipelineRunData, PipelineRunRequest

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/pipeline", tags=["Pipeline"])


@router.post(
    "/runs",
    summary="Run the fusion pipeline on a dataset, or NBV planning on a finished run",
    response_model=ApiResponse[PipelineRunData],
)
def create_run(body: PipelineRunRequest, app_settings: Settings) -> ApiResponse[PipelineRunData]:
    out_dir = app_settings.resolve_data_path(body.out)

    if body.stage == "nbv":
        if body.run_dir is None:
            raise InvalidInput("stage nbv needs run_dir")
        run_dir = app_settings.resolve_data_path(body.run_dir)
        config = body.config or PipelineConfig.load(run_dir / "config.json")
        if body.no_anchor:
            config = config.with_overrides(**{"prior.lambda_anchor": 0.0})
        logger.info(f"pipeline nbv requested: {run_dir} -> {out_dir}")
        report, _ = pipeline.plan_next_view(config, run_dir, out_dir)
        return ApiResponse(
            message="Next best view selected",
            data=PipelineRunData(
                out_dir=str(out_dir),
                selected_view=report.selected_id,
                utility=report.selected.utility,
            ),
        )

    if body.dataset is None:
        raise InvalidInput("stage run needs dataset")
    config = body.config or PipelineConfig()
    if body.no_anchor:
        config = config.with_overrides(**{"prior.lambda_anchor": 0.0})
    dataset = load_dataset(app_settings.resolve_data_path(body.dataset))
    logger.info(f"pipeline run requested: {body.dataset} -> {out_dir}")
    result = pipeline.run(config, dataset, out_dir)
    return ApiResponse(
        message=(
            "Pipeline run completed"
            if result.converged
            else "Pipeline run completed with dropped variance solves"
        ),
        data=PipelineRunData(
            out_dir=str(out_dir),
            metrics={method: report.row() for method, report in result.reports.items()},
            converged=result.converged,
        ),
    )
