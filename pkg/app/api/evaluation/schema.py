from pydantic import Field

from ..global_schema import BaseModel

Point = tuple[float, float, float]


# Schema for POST /evaluation/
class EvaluationRequest(BaseModel):
    predicted: list[Point] = Field(min_length=1)
    ground_truth: list[Point] = Field(min_length=1)
    thresholds_mm: list[float] = Field([20.0, 50.0], min_length=1)


class EvaluationData(BaseModel):
    chamfer: float
    accuracy: float
    completeness: float
    fscore: dict[str, float]
    n_pred: int
    n_gt: int
