#!/usr/bin/env python3
"""Run the built-in experiment recipes against a prepared data root.

Expects ``<data-root>/processed/labeled.jsonl`` (and ``mosaics/``) to exist —
run the ``scrape`` and ``preprocess`` CLI subcommands first. Executes every
recipe (or a ``--only`` subset), prints each run's metrics, and emits the
per-category comparison table over all finished regression runs.
"""

from __future__ import annotations

import argparse
import sys

from welfare_vision.config import load_config
from welfare_vision.metrics import MetricsReport
from welfare_vision.recipes import builtin_recipes, run_recipe
from welfare_vision.reporting import render_category_table


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-root", required=True, help="root holding raw/ and processed/")
    parser.add_argument("--config", default=None, help="optional YAML config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--backbone", dest="backbone_id", default=None,
                        help="smallnet, resnet18, resnet34, or a -random variant")
    parser.add_argument("--only", nargs="*", default=None,
                        help="subset of recipe names (default: all)")
    args = parser.parse_args(argv)

    config = load_config(
        args.config,
        data_root=args.data_root,
        seed=args.seed,
        epochs=args.epochs,
        backbone_id=args.backbone_id,
    )
    recipes = builtin_recipes()
    names = args.only if args.only else sorted(recipes)
    unknown = [n for n in names if n not in recipes]
    if unknown:
        parser.error(f"unknown recipes {unknown}; built-ins: {', '.join(sorted(recipes))}")

    regression_reports: dict[str, MetricsReport] = {}
    for name in names:
        entry = run_recipe(recipes[name], config)
        total = sum(entry.stage_timings_s.values())
        print(f"{name}: {entry.status} in {total:.0f}s -> {config.runs_dir / entry.run_id}")
        report = MetricsReport.load(config.runs_dir / entry.run_id / "report.json")
        rendered = ", ".join(f"{k}={v:.4f}" for k, v in sorted(report.metrics.items()))
        print(f"  n_valid={report.n_valid}  {rendered}")
        if name.startswith("regression-"):
            regression_reports[name.removeprefix("regression-")] = report

    if len(regression_reports) > 1:
        out = config.runs_dir / "category-table.txt"
        render_category_table(regression_reports, out, config_hash=config.config_hash)
        print(f"\ncategory comparison table -> {out}")
        print(out.read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
