# poolforge/cli.py

from __future__ import annotations

from typing import Callable, Sequence

import click
from dotenv import load_dotenv

from poolforge.__about__ import __version__
from poolforge.config import BackendKind, RunConfig, load_run_config
from poolforge.errors import PoolforgeError
from poolforge.log import configure_logging, get_logger
from poolforge.pipeline import (
    StageOutcome,
    cmd_analyze,
    cmd_embed,
    cmd_generate,
    cmd_judge_export,
    cmd_prompts_export,
    cmd_report,
    cmd_score,
)
from poolforge.prompts import REFERENCE_POOL_SIZE

logger = get_logger(__name__)

# exit code of a stage that finished but left some cells or prompts failed
PARTIAL_FAILURE = 2


def _load(config_path: str, seed_override: int | None, backend: str | None) -> RunConfig:
    return load_run_config(config_path).with_overrides(seed=seed_override, backend=backend)


def _finish(ctx: click.Context, outcome: StageOutcome) -> None:
    click.echo(outcome.summary())
    if not outcome.ok:
        for failure in outcome.failures:
            click.echo(f"  {failure['subject']}: {failure['error']}", err=True)
        ctx.exit(PARTIAL_FAILURE)


def stage_options(func: Callable) -> Callable:
    """Options every pipeline stage accepts."""
    func = click.option(
        "--backend",
        type=click.Choice([k.value for k in BackendKind]),
        default=None,
        help="Override backend.kind from the config.",
    )(func)
    func = click.option("--seed-override", type=int, default=None, help="Override seeds.run.")(func)
    func = click.option(
        "--only-cells",
        multiple=True,
        metavar="GLOB",
        help="Restrict the grid to cells whose model/prompt/method/strategy key matches (repeatable).",
    )(func)
    func = click.option(
        "--config",
        "config_path",
        required=True,
        type=click.Path(exists=True, dir_okay=False),
        help="Run config YAML.",
    )(func)
    return func


def _run_stage(
    ctx: click.Context,
    stage: Callable[..., StageOutcome],
    config_path: str,
    seed_override: int | None,
    backend: str | None,
    **kwargs,
) -> None:
    try:
        outcome = stage(_load(config_path, seed_override, backend), **kwargs)
    except PoolforgeError as e:
        raise click.ClickException(str(e)) from e
    _finish(ctx, outcome)


########################################
# COMMANDS
########################################


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.version_option(__version__, prog_name="poolforge")
def cli(verbose: bool) -> None:
    """Generate candidate pools under diversification methods and measure them."""
    configure_logging(verbose)


@cli.command()
@stage_options
@click.option("--resume/--no-resume", default=True, show_default=True, help="Skip cells already complete.")
@click.pass_context
def generate(ctx, config_path, only_cells, seed_override, backend, resume):
    """Generate the seed and evaluated pools of every cell."""
    _run_stage(ctx, cmd_generate, config_path, seed_override, backend, only_cells=only_cells, resume=resume)


@cli.command()
@stage_options
@click.pass_context
def embed(ctx, config_path, only_cells, seed_override, backend):
    """Embed evaluated pools and fit each prompt's semantic regions."""
    _run_stage(ctx, cmd_embed, config_path, seed_override, backend, only_cells=only_cells)


@cli.command()
@stage_options
@click.pass_context
def score(ctx, config_path, only_cells, seed_override, backend):
    """Compute or ingest quality scores and standardize them per task."""
    _run_stage(ctx, cmd_score, config_path, seed_override, backend, only_cells=only_cells)


@cli.command()
@stage_options
@click.pass_context
def analyze(ctx, config_path, only_cells, seed_override, backend):
    """Diversity metrics, rarefaction and bootstrap replicates per cell."""
    _run_stage(ctx, cmd_analyze, config_path, seed_override, backend, only_cells=only_cells)


@cli.command()
@stage_options
@click.pass_context
def report(ctx, config_path, only_cells, seed_override, backend):
    """Contrast, efficiency and rarefaction tables."""
    _run_stage(ctx, cmd_report, config_path, seed_override, backend, only_cells=only_cells)


@cli.group()
def prompts() -> None:
    """Prompt audit files."""


@prompts.command("export")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Directory to write into.")
@click.option("--n", "n", default=REFERENCE_POOL_SIZE, show_default=True, help="Pool size shown in planning prompts.")
def prompts_export(out: str, n: int) -> None:
    """Write every prompt the harness can send, with an index of SHA-256 hashes."""
    try:
        count = cmd_prompts_export(out, n)
    except PoolforgeError as e:
        raise click.ClickException(str(e)) from e
    click.echo(f"{count} files written to {out}")


@cli.group("judge-prompts")
def judge_prompts() -> None:
    """Slogan judge prompt files for external scoring."""


@judge_prompts.command("export")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Directory to write into.")
def judge_prompts_export(out: str) -> None:
    try:
        count = cmd_judge_export(out)
    except PoolforgeError as e:
        raise click.ClickException(str(e)) from e
    click.echo(f"{count} files written to {out}")


def main(argv: Sequence[str] | None = None) -> int:
    """Console entry point; returns the process exit code."""
    load_dotenv()
    try:
        rv = cli.main(args=list(argv) if argv is not None else None, prog_name="poolforge", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except click.exceptions.Exit as e:
        return e.exit_code
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    raise SystemExit(main())
