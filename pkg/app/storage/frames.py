import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from pydantic import ValidationError

from ..core.errors import InvalidInput, StorageError
from ..services.observation import DepthFrame, Intrinsics, RigidTransform
from ..services.scene import AnalyticScene
from ..types.arrays import Points
from .ply import read_ply, write_ply

logger = logging.getLogger(__name__)

FRAMES_DIR = "frames"
POSES_FILE = "poses.txt"
INTRINSICS_FILE = "intrinsics.json"
GT_FILE = "gt_points.ply"
SCENE_FILE = "scene.json"


@dataclass
class Dataset:
    frames: list[DepthFrame]
    gt_points: Points | None = None
    scene: AnalyticScene | None = None


def frame_path(root: Path, frame_id: int) -> Path:
    return root / FRAMES_DIR / f"frame_{frame_id:04d}.pfm"


def write_pfm(path: Path, depth: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(depth, dtype=np.float32), mode="F").save(path, format="PFM")


def read_pfm(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode != "F":
                raise StorageError(f"expected a float PFM image, got mode {img.mode}", path=str(path))
            return np.asarray(img, dtype=np.float64)
    except (OSError, SyntaxError) as e:
        raise StorageError(f"cannot read depth frame: {e}", path=str(path))


def write_poses(path: Path, frames: list[DepthFrame]) -> None:
    lines = []
    for frame in frames:
        values = " ".join(f"{v:.17g}" for v in frame.pose.matrix34().reshape(-1))
        lines.append(f"{frame.frame_id} {values}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_poses(path: Path) -> dict[int, RigidTransform]:
    if not path.exists():
        raise StorageError("poses file is missing", path=str(path))
    poses: dict[int, RigidTransform] = {}
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 13:
            raise StorageError(f"expected 13 fields, found {len(parts)}", path=str(path), line=number)
        try:
            frame_id = int(parts[0])
            poses[frame_id] = RigidTransform.from_matrix34(np.array(parts[1:], dtype=np.float64))
        except (ValueError, InvalidInput) as e:
            raise StorageError(f"malformed pose: {e}", path=str(path), line=number)
    return poses


def save_dataset(
    root: Path,
    frames: list[DepthFrame],
    gt_points: Points | None = None,
    scene: AnalyticScene | None = None,
) -> None:
    (root / FRAMES_DIR).mkdir(parents=True, exist_ok=True)
    for frame in frames:
        write_pfm(frame_path(root, frame.frame_id), frame.depth)
    write_poses(root / POSES_FILE, frames)
    (root / INTRINSICS_FILE).write_text(
        frames[0].intrinsics.model_dump_json(indent=2) + "\n", encoding="utf-8"
    )
    if gt_points is not None:
        write_ply(root / GT_FILE, gt_points)
    if scene is not None:
        (root / SCENE_FILE).write_text(scene.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"dataset written to {root}: {len(frames)} frames")


def load_dataset(root: Path) -> Dataset:
    if not root.is_dir():
        raise StorageError("dataset directory does not exist", path=str(root))
    try:
        intrinsics = Intrinsics.model_validate_json(
            (root / INTRINSICS_FILE).read_text(encoding="utf-8")
        )
    except FileNotFoundError:
        raise StorageError("intrinsics file is missing", path=str(root / INTRINSICS_FILE))
    except ValidationError as e:
        raise StorageError(f"invalid intrinsics: {e}", path=str(root / INTRINSICS_FILE))

    frames = []
    for frame_id, pose in sorted(read_poses(root / POSES_FILE).items()):
        path = frame_path(root, frame_id)
        if not path.exists():
            raise StorageError("depth frame listed in poses is missing", path=str(path))
        frames.append(DepthFrame(read_pfm(path), intrinsics, pose, frame_id))

    gt_points = read_ply(root / GT_FILE).vertices if (root / GT_FILE).exists() else None
    scene = None
    if (root / SCENE_FILE).exists():
        try:
            scene = AnalyticScene.model_validate(
                json.loads((root / SCENE_FILE).read_text(encoding="utf-8"))
            )
        except (ValueError, ValidationError) as e:
            raise StorageError(f"invalid scene definition: {e}", path=str(root / SCENE_FILE))
    return Dataset(frames=frames, gt_points=gt_points, scene=scene)
