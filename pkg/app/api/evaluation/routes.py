import numpy as np
from fastapi import APIRouter

from ...services.evaluation import evaluate
from ..global_schema import ApiResponse
from .schema import EvaluationData, EvaluationRequest

router = APIRouter(prefix="/evaluation", tags=["Evaluation"])


@router.post(
    "/",
    summary="Chamfer distance, accuracy, completeness and F-scores of two point sets",
    response_model=ApiResponse[EvaluationData],
)
def evaluate_point_sets(body: EvaluationRequest) -> ApiResponse[EvaluationData]:
    report = evaluate(
        np.asarray(body.predicted), np.asarray(body.ground_truth), body.thresholds_mm
    )
    return ApiResponse(
        message="Metrics computed successfully",
        data=EvaluationData(
            chamfer=report.chamfer,
            accuracy=report.accuracy,
            completeness=report.completeness,
            fscore={f"F@{t:g}": f for t, f in report.fscore.items()},
            n_pred=report.n_pred,
            n_gt=report.n_gt,
        ),
    )
