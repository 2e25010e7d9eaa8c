import logging

import numpy as np
from pydantic import BaseModel, Field
from scipy.spatial import cKDTree

from ..core.errors import EmptySet, InvalidInput
from ..types.arrays import FloatArray, Points

logger = logging.getLogger(__name__)

# kd-tree candidates per query; distances are re-evaluated exactly on these
_CANDIDATES = 4
_BRUTE_CHUNK = 256


class MetricsReport(BaseModel):
    chamfer: float = Field(ge=0, description="m^2")
    accuracy: float = Field(ge=0, description="m")
    completeness: float = Field(ge=0, description="m")
    fscore: dict[float, float] = Field(description="threshold (mm) -> F in [0, 1]")
    precision: dict[float, float] = {}
    recall: dict[float, float] = {}
    n_pred: int
    n_gt: int

    def row(self) -> dict[str, float]:
        out = {
            "CD": self.chamfer,
            "Acc": self.accuracy,
            "Comp": self.completeness,
        }
        for threshold, f in self.fscore.items():
            out[f"F@{threshold:g}"] = f
        return out


def _as_points(name: str, p: Points) -> Points:
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if p.shape[0] == 0:
        raise EmptySet(f"point set {name} is empty")
    return p


def _sq_dist(a: Points, b: Points) -> FloatArray:
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def brute_force_sq_distances(queries: Points, targets: Points) -> FloatArray:
    """min_j |q_i - t_j|^2 for every query by exhaustive scan."""
    queries = _as_points("queries", queries)
    targets = _as_points("targets", targets)
    out = np.empty(queries.shape[0])
    for lo in range(0, queries.shape[0], _BRUTE_CHUNK):
        chunk = queries[lo : lo + _BRUTE_CHUNK]
        out[lo : lo + _BRUTE_CHUNK] = _sq_dist(chunk[:, None, :], targets[None, :, :]).min(axis=1)
    return out


def nearest_sq_distances(queries: Points, targets: Points, workers: int = 1) -> FloatArray:
    queries = _as_points("queries", queries)
    targets = _as_points("targets", targets)
    k = min(_CANDIDATES, targets.shape[0])
    _, idx = cKDTree(targets).query(queries, k=list(range(1, k + 1)), workers=workers)
    return _sq_dist(queries[:, None, :], targets[idx]).min(axis=1)


def _both_ways(p: Points, g: Points, brute: bool, workers: int) -> tuple[FloatArray, FloatArray]:
    if brute:
        return brute_force_sq_distances(p, g), brute_force_sq_distances(g, p)
    return nearest_sq_distances(p, g, workers), nearest_sq_distances(g, p, workers)


def _chamfer(d_pg: FloatArray, d_gp: FloatArray) -> float:
    return float(np.mean(d_pg) + np.mean(d_gp))


def _fscore(d_pg: FloatArray, d_gp: FloatArray, threshold_mm: float) -> tuple[float, float, float]:
    if threshold_mm <= 0:
        raise InvalidInput("F-score thresholds must be > 0")
    t = threshold_mm / 1000.0
    precision = float(np.mean(np.sqrt(d_pg) <= t))
    recall = float(np.mean(np.sqrt(d_gp) <= t))
    if precision + recall == 0:
        return 0.0, precision, recall
    return 2 * precision * recall / (precision + recall), precision, recall


def chamfer(p: Points, g: Points, brute: bool = False, workers: int = 1) -> float:
    return _chamfer(*_both_ways(p, g, brute, workers))


def accuracy_completeness(
    p: Points, g: Points, brute: bool = False, workers: int = 1
) -> tuple[float, float]:
    d_pg, d_gp = _both_ways(p, g, brute, workers)
    return float(np.mean(np.sqrt(d_pg))), float(np.mean(np.sqrt(d_gp)))


def fscore(
    p: Points, g: Points, thresholds_mm: list[float], brute: bool = False, workers: int = 1
) -> dict[float, float]:
    d_pg, d_gp = _both_ways(p, g, brute, workers)
    return {float(t): _fscore(d_pg, d_gp, t)[0] for t in thresholds_mm}


def evaluate(
    p: Points,
    g: Points,
    thresholds_mm: tuple[float, ...] | list[float] = (20.0, 50.0),
    brute: bool = False,
    workers: int = 1,
) -> MetricsReport:
    d_pg, d_gp = _both_ways(p, g, brute, workers)
    fs, precision, recall = {}, {}, {}
    for t in thresholds_mm:
        fs[float(t)], precision[float(t)], recall[float(t)] = _fscore(d_pg, d_gp, t)
    report = MetricsReport(
        chamfer=_chamfer(d_pg, d_gp),
        accuracy=float(np.mean(np.sqrt(d_pg))),
        completeness=float(np.mean(np.sqrt(d_gp))),
        fscore=fs,
        precision=precision,
        recall=recall,
        n_pred=int(d_pg.shape[0]),
        n_gt=int(d_gp.shape[0]),
    )
    logger.info(
        f"metrics: CD {report.chamfer:.6f} m^2, Acc {report.accuracy:.5f} m, "
        f"Comp {report.completeness:.5f} m"
    )
    return report
