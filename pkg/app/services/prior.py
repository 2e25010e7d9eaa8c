import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from ..core.errors import InvalidInput
from ..types.arrays import BoolArray, FloatArray
from .sparse_linalg import canonical_csr
from .tsdf import TsdfVolume
from .voxel_grid import EdgeList, Stencil, VoxelGrid, WeightScheme, neighbor_edges, stencil_offsets

logger = logging.getLogger(__name__)


class AnchorMode(str, Enum):
    observed = "observed"
    boundary = "boundary"


@dataclass
class PriorSpec:
    lambda_smooth: float = 1.0
    lambda_anchor: float = 0.25
    stencil: Stencil = Stencil.six
    weight_scheme: WeightScheme = WeightScheme.uniform
    anchor_mode: AnchorMode = AnchorMode.observed
    # explicit overrides; derived from the TSDF when None
    anchor_set: BoolArray | None = None
    anchor_values: FloatArray | None = None
    # nodes with TSDF support when anchor_values are explicit; all when None
    anchor_observed: BoolArray | None = None

    def __post_init__(self):
        if self.lambda_smooth < 0 or self.lambda_anchor < 0:
            raise InvalidInput("prior weights must be >= 0")


@dataclass
class PriorSystem:
    q0: sparse.csr_matrix
    b0: FloatArray
    edges: EdgeList
    anchor_mask: BoolArray
    anchor_values: FloatArray
    unanchored_components: int

    def component_labels(self) -> tuple[int, np.ndarray]:
        n = self.q0.shape[0]
        graph = sparse.coo_matrix(
            (np.ones(len(self.edges)), (self.edges.i, self.edges.j)), shape=(n, n)
        )
        return connected_components(graph, directed=False)


def _boundary_nodes(grid: VoxelGrid, edges: EdgeList) -> BoolArray:
    full = 2 * len(stencil_offsets(edges.stencil))
    degree = np.bincount(edges.i, minlength=grid.n_active) + np.bincount(
        edges.j, minlength=grid.n_active
    )
    return degree < full


def assemble_prior(grid: VoxelGrid, tsdf: TsdfVolume | None, spec: PriorSpec) -> PriorSystem:
    n = grid.n_active
    if n < 1:
        raise InvalidInput("prior needs at least one active node")
    edges = neighbor_edges(grid, spec.stencil, spec.weight_scheme)

    if spec.anchor_values is not None:
        anchor_values = np.asarray(spec.anchor_values, dtype=np.float64)
        if spec.anchor_observed is not None:
            observed = np.asarray(spec.anchor_observed, dtype=bool)
        else:
            observed = np.ones(n, dtype=bool)
    elif tsdf is not None:
        anchor_values, weights = tsdf.lookup(grid.coords)
        observed = weights > 0
        anchor_values = np.where(observed, anchor_values, 0.0)
    else:
        raise InvalidInput("anchor values need either a TSDF volume or explicit values")

    if spec.anchor_set is not None:
        anchor_mask = np.asarray(spec.anchor_set, dtype=bool)
    elif spec.anchor_mode == AnchorMode.boundary:
        anchor_mask = observed & _boundary_nodes(grid, edges)
    else:
        anchor_mask = observed
    if spec.lambda_anchor == 0:
        anchor_mask = np.zeros(n, dtype=bool)
    if not np.all(np.isfinite(anchor_values[anchor_mask])):
        raise InvalidInput("anchor values must be finite")

    lam = spec.lambda_smooth * edges.w
    anchored = np.nonzero(anchor_mask)[0]
    rows = np.concatenate([edges.i, edges.j, edges.i, edges.j, anchored])
    cols = np.concatenate([edges.i, edges.j, edges.j, edges.i, anchored])
    vals = np.concatenate([lam, lam, -lam, -lam, np.full(anchored.size, spec.lambda_anchor)])
    q0 = canonical_csr(rows, cols, vals, (n, n))

    b0 = np.zeros(n)
    b0[anchored] = spec.lambda_anchor * anchor_values[anchored]

    system = PriorSystem(
        q0=q0,
        b0=b0,
        edges=edges,
        anchor_mask=anchor_mask,
        anchor_values=anchor_values,
        unanchored_components=0,
    )
    if spec.lambda_smooth > 0:
        count, labels = system.component_labels()
    else:
        count, labels = n, np.arange(n)
    has_anchor = np.zeros(count, dtype=bool)
    has_anchor[labels[anchor_mask]] = True
    system.unanchored_components = int(count - has_anchor.sum())
    if system.unanchored_components:
        logger.warning(
            f"SingularPrior: {system.unanchored_components} of {count} graph components "
            "carry no anchor; they need observations to be determined"
        )
    return system
