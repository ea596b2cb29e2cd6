"""End-to-end experiment recipes: ordered stages over the preprocessed data.

A recipe is a named list of (module, operation, params) stages. Execution is
resumable: each completed stage appends a marker to ``stage_log.jsonl`` in
the run directory, and re-running the same recipe+config executes only the
stages after the last marker. Every run transition is appended to the
hash-chained run registry.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping

from filelock import FileLock

from .config import PipelineConfig, poverty_policy_from_name
from .manifest import CATEGORIES
from .metrics import MetricsReport
from .modeling import (
    LabeledImage,
    ModelCheckpoint,
    TrainConfig,
    evaluate,
    train_classifier,
    train_regressor,
)
from .preprocess import (
    HouseholdRecord,
    SplitSpec,
    balance_classes,
    label_poverty,
    read_labeled_dataset,
    split_dataset,
)
from .registry import RunRegistry, RunRegistryEntry
from .reporting import render_confusion, render_scatter

log = logging.getLogger(__name__)

STAGE_LOG_FILENAME = "stage_log.jsonl"
DATASET_FILENAME = "dataset.json"
EPOCHS_FILENAME = "epochs.jsonl"
CHECKPOINT_FILENAME = "checkpoint.bin"
REPORT_FILENAME = "report.json"

INPUT_MODES = ("merged", "pooled") + tuple(f"category:{c}" for c in CATEGORIES)


class RecipeValidationError(ValueError):
    pass


class UnknownRecipeError(RecipeValidationError):
    pass


class DataUnavailableError(FileNotFoundError):
    """Referenced input data (manifest, labeled set, mosaics) is missing."""


class StageExecutionError(RuntimeError):
    def __init__(self, stage_name: str, cause: BaseException):
        self.stage_name = stage_name
        self.cause = cause
        super().__init__(f"stage {stage_name} failed: {cause}")


@dataclass(frozen=True)
class Stage:
    module: str
    operation: str
    params: Mapping[str, object] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return f"{self.module}.{self.operation}"


@dataclass(frozen=True)
class ExperimentRecipe:
    name: str
    stages: tuple[Stage, ...]
    expected_outputs: tuple[str, ...]
    seed: int | None = None


@dataclass
class RunContext:
    config: PipelineConfig
    run_id: str
    run_dir: Path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataUnavailableError(f"{what} not found at {path}; run the earlier pipeline steps")
    return path


def _household_samples(
    records: list[HouseholdRecord],
    task: str,
    input_mode: str,
    mosaics_dir: Path,
) -> list[LabeledImage]:
    def target_of(record: HouseholdRecord) -> float:
        if task == "regression":
            return float(record.log_consumption)
        if record.poverty_label is None:
            raise RecipeValidationError(f"record {record.family_id} has no poverty label")
        return float(record.poverty_label)

    samples: list[LabeledImage] = []
    if input_mode == "merged":
        _require(mosaics_dir, "mosaics directory")
        for record in records:
            path = mosaics_dir / f"{record.family_id}.png"
            if path.exists():
                samples.append(LabeledImage(path=path, target=target_of(record), family_id=record.family_id))
    elif input_mode == "pooled":
        for record in records:
            for category in CATEGORIES:
                path = record.images.get(category)
                if path and Path(path).exists():
                    samples.append(
                        LabeledImage(path=Path(path), target=target_of(record), family_id=record.family_id)
                    )
    else:
        slug = input_mode.split(":", 1)[1]
        for record in records:
            path = record.images.get(slug)
            if path and Path(path).exists():
                samples.append(LabeledImage(path=Path(path), target=target_of(record), family_id=record.family_id))
    return samples


def _stage_prepare_dataset(ctx: RunContext, params: Mapping, stage_seed: int) -> list[str]:
    task = str(params.get("task", "regression"))
    input_mode = str(params.get("input_mode", "merged"))
    if input_mode not in INPUT_MODES:
        raise RecipeValidationError(f"unknown input_mode {input_mode!r}")
    labeled_path = Path(params.get("labeled_path") or ctx.config.processed_dir / "labeled.jsonl")
    _require(labeled_path, "labeled dataset")
    _, records, _ = read_labeled_dataset(labeled_path)

    if task == "classification":
        policy_name = str(params.get("policy", ctx.config.policy))
        policy = poverty_policy_from_name(policy_name, ctx.config.daily_line_usd)
        for record in records:
            record.poverty_label = label_poverty(record, policy)

    samples = _household_samples(records, task, input_mode, ctx.config.processed_dir / "mosaics")
    if not samples:
        raise DataUnavailableError(f"no usable samples for input_mode {input_mode!r}")

    if task == "classification" and params.get("balance", True):
        samples = balance_classes(samples, seed=stage_seed, label_of=lambda s: int(s.target))

    train, valid = split_dataset(samples, SplitSpec(seed=stage_seed))
    payload = {
        "task": task,
        "input_mode": input_mode,
        "seed": stage_seed,
        "n_train": len(train),
        "n_valid": len(valid),
        "train": [{"path": str(s.path), "target": s.target, "family_id": s.family_id} for s in train],
        "valid": [{"path": str(s.path), "target": s.target, "family_id": s.family_id} for s in valid],
    }
    out = ctx.run_dir / DATASET_FILENAME
    out.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    log.info("dataset for %s: %d train / %d valid", ctx.run_id, len(train), len(valid))
    return [DATASET_FILENAME]


def _load_dataset(ctx: RunContext) -> tuple[dict, list[LabeledImage], list[LabeledImage]]:
    path = _require(ctx.run_dir / DATASET_FILENAME, "stage dataset")
    payload = json.loads(path.read_text(encoding="utf-8"))

    def to_samples(rows: list[dict]) -> list[LabeledImage]:
        return [
            LabeledImage(path=Path(r["path"]), target=float(r["target"]), family_id=r.get("family_id", ""))
            for r in rows
        ]

    return payload, to_samples(payload["train"]), to_samples(payload["valid"])


def _train_config(ctx: RunContext, params: Mapping, payload: dict, stage_seed: int) -> TrainConfig:
    input_mode = payload["input_mode"]
    default_aug = "none" if input_mode == "merged" else "standard_flips_crops"
    return TrainConfig(
        task=payload["task"],
        input_mode=input_mode,
        backbone_id=str(params.get("backbone_id", ctx.config.backbone_id)),
        input_px=int(params.get("input_px", ctx.config.input_px)),
        epochs=int(params.get("epochs", ctx.config.epochs)),
        batch_size=int(params.get("batch_size", ctx.config.batch_size)),
        learning_rate=float(params.get("learning_rate", ctx.config.learning_rate)),
        seed=stage_seed,
        augmentation=str(params.get("augmentation", default_aug)),
    )


def _stage_train(ctx: RunContext, params: Mapping, stage_seed: int) -> list[str]:
    payload, train, valid = _load_dataset(ctx)
    config = _train_config(ctx, params, payload, stage_seed)
    if config.task == "regression":
        checkpoint, logs = train_regressor(train, valid, config)
    else:
        beta = float(params.get("beta", ctx.config.beta))
        checkpoint, logs = train_classifier(train, valid, config, beta=beta)
    checkpoint.save(ctx.run_dir / CHECKPOINT_FILENAME)
    with open(ctx.run_dir / EPOCHS_FILENAME, "w", encoding="utf-8") as handle:
        for entry in logs:
            handle.write(json.dumps(entry.as_dict(), sort_keys=True) + "\n")
    log.info("trained %s: best epoch %d of %d", ctx.run_id, checkpoint.best_epoch, len(logs))
    return [CHECKPOINT_FILENAME, EPOCHS_FILENAME]


def _stage_evaluate(ctx: RunContext, params: Mapping, stage_seed: int) -> list[str]:
    _, _, valid = _load_dataset(ctx)
    checkpoint = ModelCheckpoint.load(_require(ctx.run_dir / CHECKPOINT_FILENAME, "checkpoint"))
    beta = float(params.get("beta", ctx.config.beta))
    report = evaluate(checkpoint, valid, beta=beta)
    report.save(ctx.run_dir / REPORT_FILENAME)
    log.info("evaluated %s: %s", ctx.run_id, report.metrics)
    return [REPORT_FILENAME]


def _stage_render(ctx: RunContext, params: Mapping, stage_seed: int) -> list[str]:
    report = MetricsReport.load(_require(ctx.run_dir / REPORT_FILENAME, "metrics report"))
    config_hash = ctx.config.config_hash
    artifacts = []
    if report.task == "regression":
        render_scatter(report, ctx.run_dir / "scatter.png", run_id=ctx.run_id, config_hash=config_hash)
        artifacts.append("scatter.png")
    else:
        render_confusion(
            report.confusion, False, ctx.run_dir / "confusion-raw.png",
            run_id=ctx.run_id, config_hash=config_hash,
        )
        render_confusion(
            report.confusion, True, ctx.run_dir / "confusion-normalized.png",
            run_id=ctx.run_id, config_hash=config_hash,
        )
        artifacts.extend(["confusion-raw.png", "confusion-normalized.png"])
    return artifacts


StageImpl = Callable[[RunContext, Mapping, int], list]
STAGE_IMPLS: dict[tuple[str, str], StageImpl] = {
    ("preprocess", "prepare_dataset"): _stage_prepare_dataset,
    ("modeling", "train"): _stage_train,
    ("modeling", "evaluate"): _stage_evaluate,
    ("reporting", "render"): _stage_render,
}


def validate_recipe(recipe: ExperimentRecipe) -> None:
    """Reject structurally bad recipes before any stage runs."""
    if not recipe.name:
        raise RecipeValidationError("recipe name must be non-empty")
    if not recipe.stages:
        raise RecipeValidationError(f"recipe {recipe.name} has no stages")
    for stage in recipe.stages:
        if (stage.module, stage.operation) not in STAGE_IMPLS:
            raise RecipeValidationError(
                f"recipe {recipe.name}: unknown stage {stage.name!r}; "
                f"known: {sorted(m + '.' + o for m, o in STAGE_IMPLS)}"
            )
        if not isinstance(stage.params, Mapping):
            raise RecipeValidationError(f"stage {stage.name} params must be a mapping")
        mode = stage.params.get("input_mode")
        if mode is not None and mode not in INPUT_MODES:
            raise RecipeValidationError(f"stage {stage.name}: unknown input_mode {mode!r}")


def _experiment_stages(task: str, input_mode: str, **extra) -> tuple[Stage, ...]:
    prepare = {"task": task, "input_mode": input_mode, **extra}
    return (
        Stage("preprocess", "prepare_dataset", prepare),
        Stage("modeling", "train", {}),
        Stage("modeling", "evaluate", {}),
        Stage("reporting", "render", {}),
    )


def _regression_outputs() -> tuple[str, ...]:
    return (DATASET_FILENAME, CHECKPOINT_FILENAME, EPOCHS_FILENAME, REPORT_FILENAME, "scatter.png")


def _classification_outputs() -> tuple[str, ...]:
    return (
        DATASET_FILENAME,
        CHECKPOINT_FILENAME,
        EPOCHS_FILENAME,
        REPORT_FILENAME,
        "confusion-raw.png",
        "confusion-normalized.png",
    )


def builtin_recipes() -> dict[str, ExperimentRecipe]:
    """Single-category regressions, merged regression, two classifiers."""
    recipes: dict[str, ExperimentRecipe] = {}
    for slug in CATEGORIES:
        name = f"regression-{slug}"
        recipes[name] = ExperimentRecipe(
            name=name,
            stages=_experiment_stages("regression", f"category:{slug}"),
            expected_outputs=_regression_outputs(),
        )
    recipes["regression-merged"] = ExperimentRecipe(
        name="regression-merged",
        stages=_experiment_stages("regression", "merged"),
        expected_outputs=_regression_outputs(),
    )
    recipes["clf-uniform"] = ExperimentRecipe(
        name="clf-uniform",
        stages=_experiment_stages("classification", "pooled", policy="uniform", balance=True),
        expected_outputs=_classification_outputs(),
    )
    recipes["clf-by-income-group"] = ExperimentRecipe(
        name="clf-by-income-group",
        stages=_experiment_stages("classification", "pooled", policy="by-group", balance=True),
        expected_outputs=_classification_outputs(),
    )
    return recipes


def get_recipe(name: str) -> ExperimentRecipe:
    recipes = builtin_recipes()
    if name not in recipes:
        raise UnknownRecipeError(
            f"unknown recipe {name!r}; built-ins: {', '.join(sorted(recipes))}"
        )
    return recipes[name]


def _read_stage_log(path: Path) -> list[dict]:
    if not path.exists():
        return []
    rows = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _completed_stage_count(log_rows: list[dict], recipe: ExperimentRecipe) -> int:
    count = 0
    for row, stage in zip(log_rows, recipe.stages):
        if row.get("module") == stage.module and row.get("operation") == stage.operation and row.get("status") == "done":
            count += 1
        else:
            break
    return count


def run_recipe(recipe: ExperimentRecipe, config: PipelineConfig) -> RunRegistryEntry:
    """Execute (or resume) a recipe; returns the final registry entry."""
    validate_recipe(recipe)
    if recipe.seed is not None:
        config = replace(config, seed=recipe.seed)
    config_hash = config.config_hash
    run_id = f"{recipe.name}-{config_hash[:10]}"
    run_dir = config.runs_dir / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    registry = RunRegistry(config.runs_dir / "registry.jsonl")
    ctx = RunContext(config=config, run_id=run_id, run_dir=run_dir)

    (run_dir / "config.json").write_text(
        json.dumps(
            {
                "run_id": run_id,
                "recipe": recipe.name,
                "config_hash": config_hash,
                "config": config.as_dict(),
                "stages": [s.name for s in recipe.stages],
            },
            indent=2,
            sort_keys=True,
        ),
        encoding="utf-8",
    )

    stage_log_path = run_dir / STAGE_LOG_FILENAME
    completed = _completed_stage_count(_read_stage_log(stage_log_path), recipe)
    if completed:
        log.info("resuming %s: %d/%d stages already done", run_id, completed, len(recipe.stages))

    registry.append(
        RunRegistryEntry(run_id=run_id, recipe=recipe.name, config_hash=config_hash, status="running")
    )
    timings: dict[str, float] = {}
    artifacts: list[str] = []

    with FileLock(str(run_dir / ".lock")):
        for index, stage in enumerate(recipe.stages):
            if index < completed:
                continue
            impl = STAGE_IMPLS[(stage.module, stage.operation)]
            stage_seed = config.seed + index
            started = time.monotonic()
            try:
                stage_artifacts = impl(ctx, stage.params, stage_seed)
            except Exception as exc:
                registry.append(
                    RunRegistryEntry(
                        run_id=run_id,
                        recipe=recipe.name,
                        config_hash=config_hash,
                        status="failed",
                        stage_timings_s=timings,
                        error=f"{stage.name}: {exc}",
                    )
                )
                if isinstance(exc, DataUnavailableError):
                    raise
                raise StageExecutionError(stage.name, exc) from exc
            elapsed = time.monotonic() - started
            timings[stage.name] = elapsed
            artifacts.extend(str(a) for a in stage_artifacts)
            with open(stage_log_path, "a", encoding="utf-8") as handle:
                handle.write(
                    json.dumps(
                        {
                            "index": index,
                            "module": stage.module,
                            "operation": stage.operation,
                            "status": "done",
                            "wall_time_s": elapsed,
                            "finished_at": datetime.now(timezone.utc).isoformat(),
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

    missing = [name for name in recipe.expected_outputs if not (run_dir / name).exists()]
    if missing:
        entry = RunRegistryEntry(
            run_id=run_id,
            recipe=recipe.name,
            config_hash=config_hash,
            status="failed",
            stage_timings_s=timings,
            error=f"missing expected outputs: {missing}",
        )
        registry.append(entry)
        raise StageExecutionError("expected_outputs", FileNotFoundError(missing))

    entry = RunRegistryEntry(
        run_id=run_id,
        recipe=recipe.name,
        config_hash=config_hash,
        status="done",
        artifacts=sorted(set(recipe.expected_outputs)),
        stage_timings_s=timings,
    )
    registry.append(entry)
    return entry
