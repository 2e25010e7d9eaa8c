from typing import Any


class FusionError(Exception):
    exit_code: int = 1
    http_status: int = 422

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> dict[str, Any]:
        return {
            "error": type(self).__name__,
            "message": self.message,
            **{k: v for k, v in self.details.items() if _is_plain(v)},
        }


def _is_plain(value: Any) -> bool:
    return isinstance(value, (str, int, float, bool)) or value is None


# configuration / input
class ConfigError(FusionError):
    exit_code = 2


class InvalidInput(FusionError):
    exit_code = 2


# geometry
class EmptyBand(FusionError):
    exit_code = 3


class OutsideBand(FusionError):
    exit_code = 3


class NoObservations(FusionError):
    exit_code = 3


class InvalidDepth(FusionError):
    exit_code = 2


class DegenerateNeighborhood(FusionError):
    exit_code = 3


class EmptyMesh(FusionError):
    exit_code = 3


class EmptySet(FusionError):
    exit_code = 2


class NoVisibleSurface(FusionError):
    exit_code = 3


# linear algebra
class SolverError(FusionError):
    exit_code = 3
    http_status = 500


class DimensionMismatch(SolverError):
    pass


class SingularMatrix(SolverError):
    pass


class SingularSystem(SolverError):
    pass


class BreakdownIndefinite(SolverError):
    pass


class NotConverged(SolverError):
    def __init__(self, message: str, x: Any = None, stats: Any = None, **details: Any):
        super().__init__(message, **details)
        self.x = x
        self.stats = stats


class AllCandidatesInvalid(SolverError):
    pass


# storage
class StorageError(FusionError):
    exit_code = 4
    http_status = 500

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        super().__init__(message, path=path, line=line)
        self.path = path
        self.line = line
