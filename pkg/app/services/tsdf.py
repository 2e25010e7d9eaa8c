import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core.errors import NoObservations
from ..types.arrays import Coords, FloatArray
from .observation import DepthFrame, backproject_pixels
from .voxel_grid import (
    GridConfig,
    decode_block_keys,
    encode_block_keys,
    group_by_block,
    lexicographic_order,
    voxel_to_world,
    world_to_voxel,
)

logger = logging.getLogger(__name__)

# Blocks processed per integration chunk
_CHUNK_BLOCKS = 2048

_AXIS_SHIFTS = np.array(
    [[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
    dtype=np.int64,
)


@dataclass
class TsdfVolume:
    config: GridConfig
    tau: float
    block_index: dict[tuple[int, int, int], int] = field(default_factory=dict)
    values: FloatArray = field(default=None)  # type: ignore[assignment]
    weights: FloatArray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        b = self.config.block_size
        if self.values is None:
            self.values = np.zeros((0, b, b, b))
        if self.weights is None:
            self.weights = np.zeros((0, b, b, b))

    @classmethod
    def empty(cls, config: GridConfig, tau: float) -> "TsdfVolume":
        if tau <= 0:
            raise ValueError("tau must be > 0")
        return cls(config=config, tau=tau)

    @classmethod
    def from_dense(
        cls,
        values: FloatArray,
        weights: FloatArray,
        config: GridConfig,
        tau: float,
        offset: tuple[int, int, int] = (0, 0, 0),
    ) -> "TsdfVolume":
        volume = cls.empty(config, tau)
        idx = np.argwhere(np.ones(values.shape, dtype=bool))
        coords = idx + np.asarray(offset, dtype=np.int64)
        volume.allocate_coords(coords)
        volume.write(coords, values.reshape(-1), weights.reshape(-1))
        return volume

    @property
    def n_blocks(self) -> int:
        return len(self.block_index)

    @property
    def blocks(self) -> dict[tuple[int, int, int], tuple[FloatArray, FloatArray]]:
        return {k: (self.values[s], self.weights[s]) for k, s in self.block_index.items()}

    def block_keys(self) -> Coords:
        if not self.block_index:
            return np.empty((0, 3), dtype=np.int64)
        return np.asarray(list(self.block_index.keys()), dtype=np.int64)

    def allocate_coords(self, coords: Coords) -> int:
        b = self.config.block_size
        keys = np.unique(encode_block_keys(np.floor_divide(coords, b)))
        fresh = [
            k for k in map(tuple, decode_block_keys(keys).tolist()) if k not in self.block_index
        ]
        if fresh:
            start = len(self.block_index)
            for offset, key in enumerate(fresh):
                self.block_index[key] = start + offset
            pad = np.zeros((len(fresh), b, b, b))
            self.values = np.concatenate([self.values, pad])
            self.weights = np.concatenate([self.weights, pad.copy()])
        return len(fresh)

    def _slots(self, coords: Coords) -> tuple[np.ndarray, np.ndarray]:
        slot = np.full(coords.shape[0], -1, dtype=np.int64)
        local = np.zeros_like(coords)
        for key, sel, loc in group_by_block(coords, self.config.block_size):
            s = self.block_index.get(key)
            if s is not None:
                slot[sel] = s
                local[sel] = loc
        return slot, local

    def write(self, coords: Coords, values: FloatArray, weights: FloatArray) -> None:
        slot, local = self._slots(coords)
        ok = slot >= 0
        self.values[slot[ok], local[ok, 0], local[ok, 1], local[ok, 2]] = values[ok]
        self.weights[slot[ok], local[ok, 0], local[ok, 1], local[ok, 2]] = weights[ok]

    def lookup(self, coords: Coords) -> tuple[FloatArray, FloatArray]:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        slot, local = self._slots(coords)
        ok = slot >= 0
        values = np.full(coords.shape[0], np.nan)
        weights = np.zeros(coords.shape[0])
        values[ok] = self.values[slot[ok], local[ok, 0], local[ok, 1], local[ok, 2]]
        weights[ok] = self.weights[slot[ok], local[ok, 0], local[ok, 1], local[ok, 2]]
        return values, weights

    def dense_voxels(self) -> tuple[Coords, FloatArray, FloatArray]:
        """All allocated voxels in lexicographic coordinate order."""
        b = self.config.block_size
        if not self.block_index:
            return np.empty((0, 3), dtype=np.int64), np.empty(0), np.empty(0)
        local = np.argwhere(np.ones((b, b, b), dtype=bool))
        keys = self.block_keys()
        coords = (keys[:, None, :] * b + local[None, :, :]).reshape(-1, 3)
        slots = np.fromiter(self.block_index.values(), dtype=np.int64)
        values = self.values[slots].reshape(-1)
        weights = self.weights[slots].reshape(-1)
        order = lexicographic_order(coords)
        return coords[order], values[order], weights[order]


def allocate_frame(volume: TsdfVolume, frame: DepthFrame) -> int:
    """Allocate every block touched by the +-tau segment around each measured depth."""
    cfg = volume.config
    valid = frame.valid_mask()
    vs, us = np.nonzero(valid)
    if us.size == 0:
        return 0
    depth = frame.depth[vs, us]
    step = 0.5 * cfg.voxel_size
    span = volume.tau + cfg.voxel_size
    offsets = np.arange(-span, span + 0.5 * step, step)
    fresh = 0
    for offset in offsets:
        d = depth + offset
        keep = d > 0
        pts = backproject_pixels(us[keep], vs[keep], d[keep], frame.intrinsics, frame.pose)
        vox = np.round(world_to_voxel(pts, cfg)).astype(np.int64)
        shifted = (vox[:, None, :] + _AXIS_SHIFTS[None, :, :]).reshape(-1, 3)
        fresh += volume.allocate_coords(shifted)
    return fresh


def integrate_frame(
    volume: TsdfVolume, frame: DepthFrame, weight: float = 1.0, allocate: bool = True
) -> TsdfVolume:
    if allocate:
        allocate_frame(volume, frame)
    if volume.n_blocks == 0:
        return volume

    cfg = volume.config
    b = cfg.block_size
    tau = volume.tau
    local = np.argwhere(np.ones((b, b, b), dtype=bool))
    keys = volume.block_keys()
    slots = np.fromiter(volume.block_index.values(), dtype=np.int64)
    valid = frame.valid_mask()
    intr = frame.intrinsics
    updated = 0

    for lo in range(0, len(slots), _CHUNK_BLOCKS):
        chunk_keys = keys[lo : lo + _CHUNK_BLOCKS]
        chunk_slots = slots[lo : lo + _CHUNK_BLOCKS]
        coords = (chunk_keys[:, None, :] * b + local[None, :, :]).reshape(-1, 3)
        pixels, z = frame.project(voxel_to_world(coords, cfg))
        with np.errstate(invalid="ignore"):
            pu = np.round(pixels[:, 0])
            pv = np.round(pixels[:, 1])
            visible = (z > 0) & (pu >= 0) & (pu < frame.width) & (pv >= 0) & (pv < frame.height)
        vis = np.nonzero(visible)[0]
        pu_i = pu[vis].astype(np.int64)
        pv_i = pv[vis].astype(np.int64)
        hit = valid[pv_i, pu_i]
        vis, pu_i, pv_i = vis[hit], pu_i[hit], pv_i[hit]
        sdf_raw = frame.depth[pv_i, pu_i] - z[vis]
        front = sdf_raw > -tau
        vis, sdf_raw = vis[front], sdf_raw[front]
        if vis.size == 0:
            continue

        block_of = chunk_slots[vis // (b**3)]
        loc = local[vis % (b**3)]
        index = (block_of, loc[:, 0], loc[:, 1], loc[:, 2])
        w_old = volume.weights[index]
        v_old = volume.values[index]
        w_new = w_old + weight
        volume.values[index] = (w_old * v_old + weight * np.clip(sdf_raw, -tau, tau)) / w_new
        volume.weights[index] = w_new
        updated += vis.size

    logger.debug(f"frame {frame.frame_id}: {updated} voxels updated")
    return volume


def bootstrap(
    frames: Sequence[DepthFrame],
    cfg: GridConfig,
    tau: float,
    max_depth: float | None = None,
) -> TsdfVolume:
    if len(frames) == 0:
        raise NoObservations("bootstrap needs at least one frame")
    frames = [f.with_max_depth(max_depth) for f in frames]
    volume = TsdfVolume.empty(cfg, tau)
    # allocate everything first so every frame sees the same block set
    for frame in frames:
        allocate_frame(volume, frame)
    for frame in frames:
        integrate_frame(volume, frame, allocate=False)

    observed = int(np.count_nonzero(volume.weights > 0))
    if observed == 0:
        raise NoObservations("no voxel received a TSDF update", frames=len(frames))
    logger.info(
        f"TSDF bootstrap: {len(frames)} frames, {volume.n_blocks} blocks, {observed} observed voxels"
    )
    return volume
