import logging
import time
from contextlib import contextmanager
from pathlib import Path

logger = logging.getLogger(__name__)


class StageTimer:
    def __init__(self):
        self.stages: list[tuple[str, float]] = []

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.stages.append((name, elapsed))
            logger.info(f"stage {name} finished in {elapsed:.3f}s")

    @property
    def total(self) -> float:
        return sum(seconds for _, seconds in self.stages)

    def write(self, path: Path) -> None:
        lines = [f"{name} {seconds:.6f}" for name, seconds in self.stages]
        lines.append(f"total {self.total:.6f}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
