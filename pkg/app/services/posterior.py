import logging
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, Field
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from ..core.errors import InvalidInput, NotConverged, SingularSystem, SolverError
from ..types.arrays import BoolArray, FloatArray, IntArray
from ..utils.parallel import ordered_map
from .observation import ObservationSet
from .prior import PriorSystem
from .sparse_linalg import PrecisionOperator, SolveStats, dense_solve_oracle, pcg

logger = logging.getLogger(__name__)


class SolverOptions(BaseModel):
    tol: float = Field(1e-8, gt=0, lt=1, description="MAP relative residual tolerance")
    max_iter: int | None = Field(None, ge=1, description="PCG iteration cap (None: 10*sqrt(N)+200)")

    model_config = {"extra": "forbid"}


class VarianceOptions(BaseModel):
    k_probes: int = Field(32, ge=1, description="Rademacher probe count K")
    probe_tol: float = Field(1e-6, gt=0, lt=1, description="per-probe PCG tolerance")
    variance_floor: float = Field(1e-12, gt=0, description="lower clamp on variance (m^2)")

    model_config = {"extra": "forbid"}


@dataclass
class Posterior:
    mu: FloatArray
    s_hat: FloatArray
    probes_used: int
    seed: int
    stats: list[SolveStats] = field(default_factory=list)
    k_requested: int | None = None

    @property
    def n(self) -> int:
        return int(self.mu.shape[0])

    @property
    def converged(self) -> bool:
        """False when some variance solves were dropped for missing the tolerance."""
        return self.k_requested is None or self.probes_used == self.k_requested


def undetermined_nodes(
    q0: sparse.csr_matrix, observations: ObservationSet, anchor_mask: BoolArray | None = None
) -> BoolArray:
    """Nodes whose graph component carries neither an anchor nor an observation."""
    n = q0.shape[0]
    if anchor_mask is None:
        rowsum = np.asarray(q0.sum(axis=1)).reshape(-1)
        anchor_mask = rowsum > 1e-12 * np.maximum(q0.diagonal(), 1e-300)
    a = observations.design_matrix(n)
    m = a.shape[0]
    offdiag = (q0 - sparse.diags(q0.diagonal())).tocsr()
    offdiag.eliminate_zeros()
    # bipartite node/observation graph: observations couple the nodes they touch
    graph = sparse.bmat([[offdiag, a.T], [a, None]], format="csr") if m else offdiag
    _, labels = connected_components(abs(graph), directed=False)
    determined = np.zeros(labels.max() + 1, dtype=bool)
    determined[labels[:n][anchor_mask]] = True
    determined[labels[n:]] = True
    return ~determined[labels[:n]]


def _is_diagonal(m: sparse.csr_matrix) -> bool:
    coo = m.tocoo()
    return bool(np.all(coo.row == coo.col))


def solve_map(
    op: PrecisionOperator,
    b0: FloatArray,
    options: SolverOptions | None = None,
    anchor_mask: BoolArray | None = None,
) -> tuple[FloatArray, SolveStats]:
    options = options or SolverOptions()
    if np.any(op.diag <= 0):
        raise SingularSystem("precision diagonal has non-positive entries")
    loose = undetermined_nodes(op.q0, op.observations, anchor_mask)
    if np.any(loose):
        raise SingularSystem(
            f"{int(loose.sum())} nodes lie in components without anchor or observation",
            undetermined=int(loose.sum()),
        )
    h = op.rhs(b0)
    if op.observations.is_empty and _is_diagonal(op.q0):
        return h / op.diag, SolveStats(0, 0.0, True)
    mu, stats = pcg(op, h, op.diag, tol=options.tol, max_iter=options.max_iter)
    logger.info(
        f"MAP solve: N={op.n}, M={len(op.observations)}, {stats.iterations} iterations, "
        f"residual {stats.relative_residual:.2e}"
    )
    return mu, stats


def map_solve(
    prior: PriorSystem | tuple[sparse.csr_matrix, FloatArray],
    obs: ObservationSet,
    tol: float = 1e-8,
    max_iter: int | None = None,
) -> tuple[FloatArray, SolveStats]:
    if isinstance(prior, PriorSystem):
        q0, b0, anchors = prior.q0, prior.b0, prior.anchor_mask
    else:
        (q0, b0), anchors = prior, None
    op = PrecisionOperator(q0, obs)
    return solve_map(op, b0, SolverOptions(tol=tol, max_iter=max_iter), anchors)


def rademacher_probe(seed: int, k: int, n: int) -> FloatArray:
    # probe k owns its own Philox stream, independent of scheduling
    rng = np.random.Generator(np.random.Philox(key=seed).jumped(k + 1))
    return rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0


def _probe_product(
    op: PrecisionOperator, seed: int, k: int, tol: float, max_iter: int | None
) -> tuple[FloatArray | None, SolveStats | None]:
    z = rademacher_probe(seed, k, op.n)
    try:
        u, stats = pcg(op, z, op.diag, tol=tol, max_iter=max_iter)
    except NotConverged as e:
        logger.warning(f"probe {k} dropped: {e.message}")
        return None, e.stats
    return z * u, stats


def estimate_diag_variance(
    op: PrecisionOperator,
    k: int = 32,
    seed: int = 0,
    tol: float = 1e-6,
    variance_floor: float = 1e-12,
    workers: int = 1,
    max_iter: int | None = None,
) -> tuple[FloatArray, int]:
    """Rademacher diagonal estimate of Q^-1, returned with the number of probes kept."""
    if k < 1:
        raise InvalidInput("probe count K must be >= 1")
    results = ordered_map(
        lambda i: _probe_product(op, seed, i, tol, max_iter), range(k), workers
    )
    total = np.zeros(op.n)
    used = 0
    for product, _ in results:
        if product is not None:
            total += product
            used += 1
    if used == 0:
        raise SolverError("every variance probe failed to converge", probes=k)
    if used < k:
        logger.warning(f"variance estimate uses {used} of {k} probes")
    return np.maximum(total / used, variance_floor), used


def surface_band_indices(mu: FloatArray, epsilon: float) -> IntArray:
    if epsilon <= 0:
        raise InvalidInput("surface band epsilon must be > 0")
    return np.nonzero(np.abs(np.asarray(mu)) <= epsilon)[0]


def infer_posterior(
    op: PrecisionOperator,
    b0: FloatArray,
    variance: VarianceOptions | None = None,
    solver: SolverOptions | None = None,
    seed: int = 0,
    workers: int = 1,
    anchor_mask: BoolArray | None = None,
) -> Posterior:
    variance = variance or VarianceOptions()
    solver = solver or SolverOptions()
    mu, stats = solve_map(op, b0, solver, anchor_mask)
    s_hat, used = estimate_diag_variance(
        op,
        k=variance.k_probes,
        seed=seed,
        tol=variance.probe_tol,
        variance_floor=variance.variance_floor,
        workers=workers,
        max_iter=solver.max_iter,
    )
    logger.info(
        f"posterior: N={op.n}, K={used}, median variance {float(np.median(s_hat)):.3e} m^2"
    )
    return Posterior(
        mu=mu,
        s_hat=s_hat,
        probes_used=used,
        seed=seed,
        stats=[stats],
        k_requested=variance.k_probes,
    )


def dense_posterior_variance(op: PrecisionOperator) -> FloatArray:
    _, inverse = dense_solve_oracle(op)
    return np.diag(inverse).copy()
