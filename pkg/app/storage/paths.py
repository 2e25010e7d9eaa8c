from contextlib import contextmanager
from pathlib import Path

from ..core.errors import StorageError


@contextmanager
def storage_errors(path: Path):
    """Re-raise filesystem failures under path as StorageError."""
    try:
        yield
    except OSError as e:
        raise StorageError(e.strerror or str(e), path=str(e.filename or path))


def prepare_output(path: Path) -> Path:
    with storage_errors(path):
        path.mkdir(parents=True, exist_ok=True)
    if not path.is_dir():
        raise StorageError("output path is not a directory", path=str(path))
    return path
