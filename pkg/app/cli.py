import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Optional

import typer
from pydantic import ValidationError

from .core.config import PipelineConfig, settings
from .core.errors import ConfigError, FusionError, NotConverged, StorageError
from .services import pipeline
from .storage.frames import load_dataset

logger = logging.getLogger(__name__)

cli = typer.Typer(
    name="sdf-fusion",
    help="Probabilistic SDF fusion: TSDF bootstrap, GMRF posterior, meshing, NBV and metrics.",
    no_args_is_help=True,
    add_completion=False,
)

ConfigOption = Annotated[Optional[Path], typer.Option("--config", "-c", help="JSON config file")]
SeedOption = Annotated[Optional[int], typer.Option("--seed", help="RNG seed")]
WorkersOption = Annotated[Optional[int], typer.Option("--workers", "-j", help="worker threads")]
OutOption = Annotated[Path, typer.Option("--out", "-o", help="output directory")]
NoAnchorOption = Annotated[bool, typer.Option("--no-anchor", help="set lambda_anchor to 0")]
KProbesOption = Annotated[Optional[int], typer.Option("--k-probes", help="variance probes K")]


def load_config(config: Path | None, **overrides) -> PipelineConfig:
    try:
        base = PipelineConfig.load(config) if config is not None else PipelineConfig()
        return base.with_overrides(**overrides)
    except FileNotFoundError:
        raise ConfigError("config file not found", path=str(config))
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e.error_count()} error(s)", detail=str(e))


def _fail(exc: FusionError) -> None:
    logger.error(f"{type(exc).__name__}: {exc.message}")
    sys.stderr.write(json.dumps(exc.to_dict()) + "\n")
    raise typer.Exit(code=exc.exit_code)


@contextmanager
def reported_errors():
    """Turn pipeline failures into a JSON line on stderr and the matching exit code."""
    try:
        yield
    except FusionError as e:
        _fail(e)
    except OSError as e:
        _fail(StorageError(e.strerror or str(e), path=str(e.filename) if e.filename else None))


@cli.command()
def synth(
    out: OutOption,
    config: ConfigOption = None,
    seed: SeedOption = None,
    workers: WorkersOption = None,
):
    """Render the synthetic scene into a dataset directory."""
    with reported_errors():
        cfg = load_config(config, seed=seed, workers=workers)
        pipeline.synthesize(cfg, out)


@cli.command()
def run(
    dataset: Annotated[Path, typer.Argument(help="dataset directory")],
    out: OutOption,
    config: ConfigOption = None,
    seed: SeedOption = None,
    workers: WorkersOption = None,
    no_anchor: NoAnchorOption = False,
    k_probes: KProbesOption = None,
):
    """Fuse a dataset: bootstrap, posterior, meshes, metrics."""
    with reported_errors():
        cfg = load_config(
            config,
            seed=seed,
            workers=workers,
            **{
                "prior.lambda_anchor": 0.0 if no_anchor else None,
                "variance.k_probes": k_probes,
            },
        )
        result = pipeline.run(cfg, load_dataset(dataset), out)
        for method, report in result.reports.items():
            row = ", ".join(f"{k} {v:.6g}" for k, v in report.row().items())
            typer.echo(f"{method}: {row}")
        if not result.converged:
            posterior = result.fit.posterior
            raise NotConverged(
                f"{posterior.k_requested - posterior.probes_used} of "
                f"{posterior.k_requested} variance solves did not converge; "
                f"outputs in {out} average the converged solves",
                used=posterior.probes_used,
                requested=posterior.k_requested,
            )


@cli.command()
def nbv(
    run_dir: Annotated[Path, typer.Argument(help="output directory of a finished run")],
    out: OutOption,
    config: Annotated[
        Optional[Path], typer.Option("--config", "-c", help="JSON config file (default: RUN_DIR/config.json)")
    ] = None,
    seed: SeedOption = None,
    workers: WorkersOption = None,
    no_anchor: NoAnchorOption = False,
    k_probes: KProbesOption = None,
):
    """Score candidate views against a finished run and select the next best one."""
    with reported_errors():
        if config is None:
            config = run_dir / "config.json"
            if not config.is_file():
                raise StorageError("not a run directory: config.json is missing", path=str(run_dir))
        cfg = load_config(
            config,
            seed=seed,
            workers=workers,
            **{
                "prior.lambda_anchor": 0.0 if no_anchor else None,
                "variance.k_probes": k_probes,
            },
        )
        report, _ = pipeline.plan_next_view(cfg, run_dir, out)
        best = report.selected
        typer.echo(f"selected view {best.id}: utility {best.utility:.6g} m^2")


@cli.command("eval")
def evaluate(
    predicted: Annotated[Path, typer.Argument(help="predicted PLY (mesh or points)")],
    ground_truth: Annotated[Path, typer.Argument(help="ground-truth PLY")],
    out: OutOption,
    config: ConfigOption = None,
    seed: SeedOption = None,
    workers: WorkersOption = None,
):
    """Chamfer, accuracy, completeness and F-scores between two PLY files."""
    with reported_errors():
        cfg = load_config(config, seed=seed, workers=workers)
        report = pipeline.evaluate_files(cfg, predicted, ground_truth, out)
        typer.echo(", ".join(f"{k} {v:.6g}" for k, v in report.row().items()))


@cli.command()
def schema():
    """Print the JSON schema of the pipeline configuration."""
    typer.echo(PipelineConfig.json_schema_text())


def main():
    logging.basicConfig(level=settings.log_level)
    cli()


if __name__ == "__main__":
    main()
