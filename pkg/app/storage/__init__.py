from .frames import load_dataset, save_dataset
from .paths import prepare_output, storage_errors
from .ply import read_ply, write_ply
from .reports import write_metrics, write_rows
from .state import read_state, write_state
from .volume import read_volume, write_volume

__all__ = [
    "load_dataset",
    "save_dataset",
    "prepare_output",
    "storage_errors",
    "read_ply",
    "write_ply",
    "write_metrics",
    "write_rows",
    "read_state",
    "write_state",
    "read_volume",
    "write_volume",
]
