import zipfile
from pathlib import Path

import numpy as np

from ..core.errors import StorageError
from ..services.observation import ObservationSet
from ..types.arrays import FloatArray

_OBSERVATION_FIELDS = ("y", "cols", "weights", "sigma2", "frame_ids", "pixels")
_NODE_FIELDS = ("anchor_values", "anchor_observed")


def write_state(path: Path, observations: ObservationSet, **nodes: np.ndarray) -> None:
    """Full-precision solver inputs for rebuilding Q and b0 of a finished run."""
    missing = set(_NODE_FIELDS) - set(nodes)
    if missing:
        raise StorageError(f"posterior state needs {sorted(missing)}", path=str(path))
    with open(path, "wb") as f:
        np.savez(
            f,
            **{name: getattr(observations, name) for name in _OBSERVATION_FIELDS},
            **{name: np.asarray(nodes[name]) for name in _NODE_FIELDS},
        )


def read_state(path: Path) -> tuple[ObservationSet, dict[str, FloatArray]]:
    try:
        with np.load(path, allow_pickle=False) as data:
            observations = ObservationSet(**{name: data[name] for name in _OBSERVATION_FIELDS})
            nodes = {name: data[name] for name in _NODE_FIELDS}
    except FileNotFoundError:
        raise StorageError("posterior state is missing", path=str(path))
    except KeyError as e:
        raise StorageError(f"posterior state lacks array {e}", path=str(path))
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise StorageError(f"cannot read posterior state: {e}", path=str(path))
    return observations, nodes
