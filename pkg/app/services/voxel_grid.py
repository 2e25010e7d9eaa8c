from dataclasses import dataclass, field
from enum import Enum
from itertools import product

import numpy as np
from pydantic import BaseModel, Field, field_validator

from ..core.errors import OutsideBand
from ..types.arrays import BoolArray, Coords, FloatArray, IntArray, Points

# Encodes a block coordinate triple into one int64 for fast grouping.
_KEY_SHIFT = 21
_KEY_OFFSET = 1 << (_KEY_SHIFT - 1)

# Corner order of a cell: x slowest, z fastest.
CELL_CORNERS: IntArray = np.array(list(product((0, 1), repeat=3)), dtype=np.int64)


class Stencil(int, Enum):
    six = 6
    eighteen = 18
    twenty_six = 26


class WeightScheme(str, Enum):
    uniform = "uniform"
    inverse_distance = "inverse-distance"


class GridConfig(BaseModel):
    origin: tuple[float, float, float] = Field(
        (0.0, 0.0, 0.0), description="world position of voxel center (0,0,0) (m)"
    )
    voxel_size: float = Field(0.005, gt=0, description="voxel edge length (m)")
    block_size: int = Field(8, ge=2, description="voxels per block edge")

    @field_validator("block_size")
    @classmethod
    def _power_of_two(cls, v: int) -> int:
        if v & (v - 1):
            raise ValueError("block_size must be a power of two")
        return v

    @property
    def origin_array(self) -> FloatArray:
        return np.asarray(self.origin, dtype=np.float64)

    model_config = {"frozen": True, "extra": "forbid"}


def world_to_voxel(p: Points, cfg: GridConfig) -> FloatArray:
    return (np.asarray(p, dtype=np.float64) - cfg.origin_array) / cfg.voxel_size


def voxel_to_world(v: FloatArray, cfg: GridConfig) -> Points:
    return cfg.origin_array + np.asarray(v, dtype=np.float64) * cfg.voxel_size


def encode_block_keys(block_coords: Coords) -> IntArray:
    shifted = block_coords.astype(np.int64) + _KEY_OFFSET
    return (shifted[:, 0] << (2 * _KEY_SHIFT)) | (shifted[:, 1] << _KEY_SHIFT) | shifted[:, 2]


def decode_block_keys(keys: IntArray) -> Coords:
    mask = (1 << _KEY_SHIFT) - 1
    out = np.stack(
        [(keys >> (2 * _KEY_SHIFT)) & mask, (keys >> _KEY_SHIFT) & mask, keys & mask],
        axis=1,
    )
    return out - _KEY_OFFSET


def lexicographic_order(coords: Coords) -> IntArray:
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


def group_by_block(coords: Coords, block_size: int):
    """Yield (block triple, positions into coords, local voxel coords) per touched block."""
    block_coords = np.floor_divide(coords, block_size)
    keys = encode_block_keys(block_coords)
    order = np.argsort(keys, kind="stable")
    unique_keys, starts = np.unique(keys[order], return_index=True)
    ends = np.append(starts[1:], len(order))
    for key, lo, hi in zip(decode_block_keys(unique_keys), starts, ends):
        sel = order[lo:hi]
        yield tuple(int(c) for c in key), sel, coords[sel] - key * block_size


@dataclass
class VoxelGrid:
    config: GridConfig
    coords: Coords
    blocks: dict[tuple[int, int, int], IntArray] = field(default_factory=dict)

    @classmethod
    def from_coords(cls, coords: Coords, config: GridConfig) -> "VoxelGrid":
        coords = np.unique(np.asarray(coords, dtype=np.int64).reshape(-1, 3), axis=0)
        coords = coords[lexicographic_order(coords)]
        b = config.block_size
        blocks: dict[tuple[int, int, int], IntArray] = {}
        for key, sel, local in group_by_block(coords, b):
            slots = np.full((b, b, b), -1, dtype=np.int64)
            slots[local[:, 0], local[:, 1], local[:, 2]] = sel
            blocks[key] = slots
        return cls(config=config, coords=coords, blocks=blocks)

    @property
    def n_active(self) -> int:
        return int(self.coords.shape[0])

    def index_of(self, coords: Coords) -> IntArray:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        out = np.full(coords.shape[0], -1, dtype=np.int64)
        if coords.shape[0] == 0:
            return out
        for key, sel, local in group_by_block(coords, self.config.block_size):
            slots = self.blocks.get(key)
            if slots is not None:
                out[sel] = slots[local[:, 0], local[:, 1], local[:, 2]]
        return out

    def positions(self) -> Points:
        return voxel_to_world(self.coords, self.config)

    def subset(self, keep: BoolArray) -> "VoxelGrid":
        return VoxelGrid.from_coords(self.coords[keep], self.config)

    def bounding_box(self) -> tuple[Coords, Coords]:
        return self.coords.min(axis=0), self.coords.max(axis=0)


@dataclass
class EdgeList:
    i: IntArray
    j: IntArray
    w: FloatArray
    stencil: Stencil

    def __len__(self) -> int:
        return int(self.i.shape[0])


def stencil_offsets(stencil: Stencil) -> IntArray:
    """Offsets of the stencil that are lexicographically positive (one per undirected pair)."""
    offsets = []
    for off in product((-1, 0, 1), repeat=3):
        if off <= (0, 0, 0):
            continue
        l1 = sum(abs(c) for c in off)
        if stencil == Stencil.six and l1 != 1:
            continue
        if stencil == Stencil.eighteen and l1 > 2:
            continue
        offsets.append(off)
    return np.asarray(offsets, dtype=np.int64)


def activate_narrow_band(tsdf, alpha: float = 2.0, tau: float | None = None) -> VoxelGrid:
    from ..core.errors import EmptyBand

    if not 1.0 <= alpha <= 3.0:
        raise ValueError(f"alpha must lie in [1, 3], got {alpha}")
    tau = tsdf.tau if tau is None else tau
    if tau <= 0:
        raise ValueError("tau must be > 0")

    coords, values, weights = tsdf.dense_voxels()
    keep = (weights > 0) & (np.abs(values) <= alpha * tau)
    if not np.any(keep):
        raise EmptyBand(
            "no observed voxel lies inside the narrow band", alpha=alpha, tau=tau
        )
    return VoxelGrid.from_coords(coords[keep], tsdf.config)


def neighbor_edges(
    grid: VoxelGrid,
    stencil: Stencil = Stencil.six,
    weight_scheme: WeightScheme = WeightScheme.uniform,
) -> EdgeList:
    stencil = Stencil(stencil)
    weight_scheme = WeightScheme(weight_scheme)
    ii: list[IntArray] = []
    jj: list[IntArray] = []
    ww: list[FloatArray] = []
    nodes = np.arange(grid.n_active, dtype=np.int64)
    for off in stencil_offsets(stencil):
        j = grid.index_of(grid.coords + off)
        hit = j >= 0
        ii.append(nodes[hit])
        jj.append(j[hit])
        # voxel_size / |x_i - x_j| with |x_i - x_j| = voxel_size * |off|
        w = 1.0 if weight_scheme == WeightScheme.uniform else 1.0 / float(np.linalg.norm(off))
        ww.append(np.full(int(hit.sum()), w))

    i = np.concatenate(ii) if ii else np.empty(0, dtype=np.int64)
    j = np.concatenate(jj) if jj else np.empty(0, dtype=np.int64)
    w = np.concatenate(ww) if ww else np.empty(0)
    order = np.lexsort((j, i))
    return EdgeList(i=i[order], j=j[order], w=w[order], stencil=stencil)


def trilinear_stencils(
    points: Points, grid: VoxelGrid, min_corners: int = 4
) -> tuple[IntArray, FloatArray, BoolArray]:
    """Batch trilinear stencils.

    Returns corner indices (P, 8) with -1 for unused corners, weights (P, 8)
    renormalized over the active corners, and a per-point acceptance mask.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    v = world_to_voxel(points, grid.config)
    snapped = np.round(v)
    v = np.where(np.abs(v - snapped) < 1e-9, snapped, v)
    base = np.floor(v).astype(np.int64)
    frac = v - base

    per_axis = np.where(CELL_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    weights = per_axis.prod(axis=2)
    idx = grid.index_of((base[:, None, :] + CELL_CORNERS[None, :, :]).reshape(-1, 3))
    idx = idx.reshape(-1, 8)

    needed = weights > 0
    usable = needed & (idx >= 0)
    complete = ~np.any(needed & (idx < 0), axis=1)
    ok = complete | (usable.sum(axis=1) >= min_corners)

    weights = np.where(usable, weights, 0.0)
    total = weights.sum(axis=1)
    ok &= total > 0
    weights[ok] /= total[ok, None]
    weights[~ok] = 0.0
    idx = np.where(usable & ok[:, None], idx, -1)
    return idx, weights, ok


def trilinear_stencil(
    p: Points, grid: VoxelGrid, min_corners: int = 4
) -> list[tuple[int, float]]:
    idx, weights, ok = trilinear_stencils(np.asarray(p)[None, :], grid, min_corners)
    if not ok[0]:
        raise OutsideBand(
            "too few active corners around point", point=str(np.asarray(p).tolist())
        )
    return [(int(i), float(w)) for i, w in zip(idx[0], weights[0]) if i >= 0]


def interpolate(points: Points, grid: VoxelGrid, values: FloatArray, min_corners: int = 4) -> FloatArray:
    idx, weights, ok = trilinear_stencils(points, grid, min_corners)
    gathered = np.where(idx >= 0, values[np.maximum(idx, 0)], 0.0)
    out = (weights * gathered).sum(axis=1)
    return np.where(ok, out, np.nan)
