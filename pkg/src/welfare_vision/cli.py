"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 stage failure, 4 data
unavailable. Configuration comes from ``--config`` (YAML), with the data
root falling back to ``$WEALTH_DATA_ROOT`` and then ``./wealth-data``.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .config import ConfigError, PipelineConfig, load_config, poverty_policy_from_name
from .ingestion import (
    IngestionError,
    NetworkUnreachableError,
    ScrapeConfig,
    run_scrape,
)
from .manifest import ManifestError
from .metrics import MetricsReport, UndefinedMetricError
from .modeling import ModelingError
from .preprocess import PreprocessError, run_preprocess
from .recipes import (
    DataUnavailableError,
    ExperimentRecipe,
    RecipeValidationError,
    StageExecutionError,
    builtin_recipes,
    get_recipe,
    run_recipe,
)
from .registry import RegistryIntegrityError, RunRegistry, UnknownRunError
from .reporting import ReportingError, render_category_table, render_confusion, render_scatter

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE_FAILURE = 3
EXIT_DATA_UNAVAILABLE = 4

_VALIDATION_ERRORS = (
    ConfigError,
    IngestionError,
    ManifestError,
    PreprocessError,
    ModelingError,
    RecipeValidationError,
    ReportingError,
    UndefinedMetricError,
    RegistryIntegrityError,
)

log = logging.getLogger(__name__)


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(func):
    """Map domain errors onto the documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (NetworkUnreachableError, DataUnavailableError) as exc:
            _fail(EXIT_DATA_UNAVAILABLE, str(exc))
        except StageExecutionError as exc:
            _fail(EXIT_STAGE_FAILURE, str(exc))
        except _VALIDATION_ERRORS as exc:
            _fail(EXIT_VALIDATION, str(exc))
        except UnknownRunError as exc:
            _fail(EXIT_VALIDATION, f"unknown run id {exc.args[0]!r}")
        except FileNotFoundError as exc:
            _fail(EXIT_DATA_UNAVAILABLE, str(exc))

    wrapper.__name__ = func.__name__
    wrapper.__doc__ = func.__doc__
    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML configuration file.")
@click.option("--data-root", type=click.Path(file_okay=False), default=None,
              help="Override the data root (else $WEALTH_DATA_ROOT, else ./wealth-data).")
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, data_root: str | None, verbose: bool) -> None:
    """Wealth-image pipeline: scrape, preprocess, train, report."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        overrides = {"data_root": data_root} if data_root else {}
        ctx.obj = load_config(config_path, **overrides)
    except (ConfigError, OSError) as exc:
        _fail(EXIT_VALIDATION, f"bad configuration: {exc}")


@main.command()
@click.option("--base-url", default=None, help="Root URL of the family-index site.")
@click.option("--categories", default=None,
              help="Comma-separated category slugs (default: all seven).")
@click.option("--out", "out_root", type=click.Path(file_okay=False), default=None,
              help="Output directory (default: <data-root>/raw).")
@click.option("--max-concurrent", type=int, default=None)
@click.option("--min-interval-ms", type=int, default=None,
              help="Minimum per-host request spacing.")
@click.option("--no-resume", is_flag=True, help="Redownload everything.")
@click.pass_obj
@_guarded
def scrape(config: PipelineConfig, base_url: str | None, categories: str | None,
           out_root: str | None, max_concurrent: int | None,
           min_interval_ms: int | None, no_resume: bool) -> None:
    """Download family images and write the raw manifest."""
    url = base_url or config.base_url
    if not url:
        _fail(EXIT_VALIDATION, "no base URL: pass --base-url or set base_url in the config")
    scrape_config = ScrapeConfig(
        base_url=url,
        output_root=Path(out_root) if out_root else config.raw_dir,
        categories=(
            tuple(c.strip() for c in categories.split(",") if c.strip())
            if categories
            else config.categories
        ),
        max_concurrent=max_concurrent or config.max_concurrent,
        min_request_interval_ms=(
            min_interval_ms if min_interval_ms is not None else config.min_request_interval_ms
        ),
        resume=not no_resume,
    )
    result = run_scrape(scrape_config)
    click.echo(
        f"scraped {len(result.manifest.households)} families "
        f"({result.n_downloaded} downloaded, {result.n_resumed} already present, "
        f"{len(result.errors)} errors) -> {result.manifest_path}"
    )


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False), default=None,
              help="Manifest produced by scrape (default: <data-root>/raw/manifest.jsonl).")
@click.option("--out", "out_root", type=click.Path(file_okay=False), default=None,
              help="Output directory (default: <data-root>/processed).")
@click.option("--policy", type=click.Choice(["uniform", "by-group"]), default=None)
@click.option("--daily-line", type=float, default=None, help="Uniform daily poverty line in USD.")
@click.option("--cap", "cap_usd", type=float, default=None, help="Outlier cap on monthly USD.")
@click.option("--seed", type=int, default=None)
@click.option("--tile-px", type=int, default=None, help="Mosaic tile side in pixels.")
@click.option("--no-mosaics", is_flag=True, help="Skip mosaic rendering.")
@click.pass_obj
@_guarded
def preprocess(config: PipelineConfig, manifest_path: str | None, out_root: str | None,
               policy: str | None, daily_line: float | None, cap_usd: float | None,
               seed: int | None, tile_px: int | None, no_mosaics: bool) -> None:
    """Label households and build merged mosaics."""
    manifest_file = Path(manifest_path) if manifest_path else config.raw_dir / "manifest.jsonl"
    if not manifest_file.exists():
        raise DataUnavailableError(f"manifest not found at {manifest_file}; run scrape first")
    chosen_policy = poverty_policy_from_name(
        policy or config.policy, daily_line if daily_line is not None else config.daily_line_usd
    )
    summary = run_preprocess(
        manifest_file,
        chosen_policy,
        Path(out_root) if out_root else config.processed_dir,
        cap_usd=cap_usd if cap_usd is not None else config.cap_usd,
        seed=seed if seed is not None else config.seed,
        tile_px=tile_px if tile_px is not None else config.tile_px,
        build_mosaics=not no_mosaics,
    )
    click.echo(
        f"kept {summary.n_kept}/{summary.n_input} households "
        f"({summary.n_dropped_outliers} over the cap); "
        f"{summary.n_poor} poor / {summary.n_nonpoor} non-poor -> {summary.labeled_path}"
    )
    click.echo(f"category counts (canonical order + merged): {summary.counts_in_canonical_order()}")


_TASK_ALIASES = {"reg": "regression", "clf": "classification"}


@main.command()
@click.option("--task", type=click.Choice(["reg", "clf"]), required=True)
@click.option("--input", "input_mode", default="merged",
              help="merged, pooled, or category:<slug>.")
@click.option("--policy", type=click.Choice(["uniform", "by-group"]), default=None,
              help="Poverty labeling for classification runs.")
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--backbone", "backbone_id", default=None)
@click.option("--input-px", type=int, default=None)
@click.option("--no-balance", is_flag=True, help="Skip class balancing (classification).")
@click.pass_obj
@_guarded
def train(config: PipelineConfig, task: str, input_mode: str, policy: str | None,
          seed: int | None, epochs: int | None, batch_size: int | None,
          learning_rate: float | None, backbone_id: str | None, input_px: int | None,
          no_balance: bool) -> None:
    """Train one model end to end (dataset, fit, evaluate, render)."""
    config = config.with_overrides(
        seed=seed, epochs=epochs, batch_size=batch_size,
        learning_rate=learning_rate, backbone_id=backbone_id, input_px=input_px,
    )
    full_task = _TASK_ALIASES[task]
    extras: dict = {}
    if full_task == "classification":
        extras = {"policy": policy or config.policy, "balance": not no_balance}
    from .recipes import _classification_outputs, _experiment_stages, _regression_outputs

    recipe = ExperimentRecipe(
        name=f"train-{task}-{input_mode.replace(':', '-')}",
        stages=_experiment_stages(full_task, input_mode, **extras),
        expected_outputs=(
            _regression_outputs() if full_task == "regression" else _classification_outputs()
        ),
    )
    entry = run_recipe(recipe, config)
    click.echo(f"run {entry.run_id}: {entry.status}; artifacts: {', '.join(entry.artifacts)}")


@main.command("run-recipe")
@click.argument("name", required=False)
@click.option("--list", "list_only", is_flag=True, help="List built-in recipes.")
@click.option("--seed", type=int, default=None)
@click.pass_obj
@_guarded
def run_recipe_command(config: PipelineConfig, name: str | None, list_only: bool,
                       seed: int | None) -> None:
    """Execute a built-in experiment recipe by name."""
    if list_only:
        for recipe_name in sorted(builtin_recipes()):
            click.echo(recipe_name)
        return
    if not name:
        _fail(EXIT_VALIDATION, "pass a recipe name or --list")
    if seed is not None:
        config = config.with_overrides(seed=seed)
    entry = run_recipe(get_recipe(name), config)
    click.echo(f"run {entry.run_id}: {entry.status}")
    for stage_name, elapsed in entry.stage_timings_s.items():
        click.echo(f"  {stage_name}: {elapsed:.1f}s")


@main.command()
@click.argument("kind", type=click.Choice(["scatter", "confusion", "table"]))
@click.option("--run", "run_ids", multiple=True, required=True,
              help="Run id (repeatable for table).")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--normalized", is_flag=True, help="Row-normalize the confusion matrix.")
@click.pass_obj
@_guarded
def report(config: PipelineConfig, kind: str, run_ids: tuple[str, ...], out_path: str,
           normalized: bool) -> None:
    """Render a figure or table from a finished run's metrics report."""
    registry = RunRegistry(config.runs_dir / "registry.jsonl")

    def load_report(run_id: str) -> MetricsReport:
        entry = registry.show_run(run_id)
        report_path = config.runs_dir / entry.run_id / "report.json"
        if not report_path.exists():
            raise DataUnavailableError(f"no report.json for run {run_id}")
        return MetricsReport.load(report_path)

    out = Path(out_path)
    if kind == "scatter":
        render_scatter(load_report(run_ids[0]), out, run_id=run_ids[0],
                       config_hash=config.config_hash)
    elif kind == "confusion":
        loaded = load_report(run_ids[0])
        if loaded.confusion is None:
            raise ReportingError(f"run {run_ids[0]} holds no confusion matrix")
        render_confusion(loaded.confusion, normalized, out, run_id=run_ids[0],
                         config_hash=config.config_hash)
    else:
        reports = {}
        for run_id in run_ids:
            registry.show_run(run_id)  # validates the id against the registry
            dataset = json.loads(
                (config.runs_dir / run_id / "dataset.json").read_text(encoding="utf-8")
            )
            mode = dataset["input_mode"]
            key = mode.split(":", 1)[1] if mode.startswith("category:") else mode
            reports[key] = load_report(run_id)
        render_category_table(reports, out, config_hash=config.config_hash)
    click.echo(f"wrote {out}")


@main.command("list-runs")
@click.pass_obj
@_guarded
def list_runs(config: PipelineConfig) -> None:
    """Show the latest status of every run in the registry."""
    registry = RunRegistry(config.runs_dir / "registry.jsonl")
    entries = registry.list_runs()
    if not entries:
        click.echo("no runs recorded")
        return
    for entry in entries:
        click.echo(f"{entry.run_id}  {entry.recipe}  {entry.status}  {entry.config_hash[:10]}")


@main.command("show-run")
@click.argument("run_id")
@click.pass_obj
@_guarded
def show_run(config: PipelineConfig, run_id: str) -> None:
    """Dump one run's latest registry entry, including stage timings."""
    registry = RunRegistry(config.runs_dir / "registry.jsonl")
    entry = registry.show_run(run_id)
    click.echo(json.dumps(entry.as_dict(), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
