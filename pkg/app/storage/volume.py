import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..core.errors import StorageError
from ..services.voxel_grid import GridConfig, VoxelGrid
from ..types.arrays import FloatArray

MAGIC = b"SDFVOL\x00\x01"
VERSION = 1
# version, origin xyz, voxel_size, block_size, tau, N
_HEADER = struct.Struct("<I3ddIdQ")


@dataclass
class StoredVolume:
    grid: VoxelGrid
    tau: float
    channels: dict[str, FloatArray]
    metadata: dict[str, Any] = field(default_factory=dict)


def write_volume(
    path: Path,
    grid: VoxelGrid,
    tau: float,
    channels: dict[str, FloatArray],
    metadata: dict[str, Any] | None = None,
) -> None:
    """Active coordinates plus float32 per-node channels (mu, s_hat, tsdf, ...)."""
    n = grid.n_active
    cfg = grid.config
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(VERSION, *cfg.origin, cfg.voxel_size, cfg.block_size, tau, n))
        f.write(grid.coords.astype("<i4").tobytes())
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(channels)))
        for name, values in channels.items():
            values = np.asarray(values)
            if values.shape != (n,):
                raise StorageError(f"channel {name} has shape {values.shape}, expected ({n},)", path=str(path))
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(values.astype("<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise StorageError("volume file is truncated", path=str(self.path))
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str | struct.Struct):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def read_volume(path: Path) -> StoredVolume:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read volume: {e}", path=str(path))
    reader = _Reader(data, Path(path))
    if reader.take(len(MAGIC)) != MAGIC:
        raise StorageError("not an SDF volume file", path=str(path))
    version, ox, oy, oz, voxel_size, block_size, tau, n = reader.unpack(_HEADER)
    if version != VERSION:
        raise StorageError(f"unsupported volume version {version}", path=str(path))

    coords = np.frombuffer(reader.take(12 * n), dtype="<i4").reshape(n, 3).astype(np.int64)
    (meta_len,) = reader.unpack("<I")
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except ValueError as e:
        raise StorageError(f"invalid metadata: {e}", path=str(path))
    (n_channels,) = reader.unpack("<I")
    channels = {}
    for _ in range(n_channels):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        channels[name] = np.frombuffer(reader.take(4 * n), dtype="<f4").astype(np.float64)

    cfg = GridConfig(origin=(ox, oy, oz), voxel_size=voxel_size, block_size=block_size)
    grid = VoxelGrid.from_coords(coords, cfg)
    if not np.array_equal(grid.coords, coords):
        raise StorageError("active coordinates are not in canonical order", path=str(path))
    return StoredVolume(grid=grid, tau=tau, channels=channels, metadata=metadata)
