import csv
from pathlib import Path
from typing import Iterable, Mapping

from ..services.evaluation import MetricsReport


def write_rows(path: Path, rows: Iterable[Mapping[str, object]]) -> None:
    rows = list(rows)
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    fieldnames = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format(v) for k, v in row.items()})


def _format(value: object) -> object:
    return f"{value:.9g}" if isinstance(value, float) else value


def write_metrics(directory: Path, reports: Mapping[str, MetricsReport]) -> None:
    """metrics.csv (one row per method) plus a human-readable metrics.txt."""
    write_rows(
        directory / "metrics.csv",
        [{"method": method, **report.row()} for method, report in reports.items()],
    )
    lines = []
    for method, report in reports.items():
        lines.append(f"[{method}]  |P| = {report.n_pred}  |G| = {report.n_gt}")
        lines.append(f"  CD   {report.chamfer:.6g} m^2")
        lines.append(f"  Acc  {report.accuracy:.6g} m")
        lines.append(f"  Comp {report.completeness:.6g} m")
        for threshold, f in report.fscore.items():
            lines.append(
                f"  F@{threshold:g}mm {f:.4f} (precision {report.precision.get(threshold, 0.0):.4f}, "
                f"recall {report.recall.get(threshold, 0.0):.4f})"
            )
    (directory / "metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
