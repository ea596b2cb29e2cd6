"""Turn a dataset manifest into labeled, model-ready datasets.

Covers adult-equivalent arithmetic, the $5000/month outlier cap, poverty
labeling under a uniform daily line or per-income-group lines, income-group
lookup against a pinned World Bank table, 3x3 mosaic construction with white
filler tiles, majority-class undersampling, and the seeded 80/20 split.
"""

from __future__ import annotations

import csv
import difflib
import json
import logging
import math
import re
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence, TypeVar

import numpy as np
from PIL import Image

from .manifest import CATEGORIES, DatasetManifest, read_manifest

log = logging.getLogger(__name__)

INCOME_TABLE_RESOURCE = "world_bank_income_groups_fy2022.csv"
DAYS_PER_MONTH = 30
DEFAULT_CAP_USD = 5000.0
LABELED_FILENAME = "labeled.jsonl"
MOSAICS_DIRNAME = "mosaics"

T = TypeVar("T")


class IncomeGroup(str, Enum):
    LIC = "LIC"
    LMIC = "LMIC"
    UMIC = "UMIC"
    HIC = "HIC"


class PreprocessError(ValueError):
    pass


class UnknownCountryError(PreprocessError):
    """Country not in the lookup table; lists nearest-name candidates."""

    def __init__(self, country: str, candidates: Sequence[str]):
        self.country = country
        self.candidates = tuple(candidates)
        hint = f"; nearest: {', '.join(candidates)}" if candidates else ""
        super().__init__(f"unknown country {country!r}{hint}")


class EmptyMosaicError(PreprocessError):
    """Record has zero category images; an all-white input must never be emitted."""


def compute_adult_equivalents(n_adults: int, n_children_under_14: int) -> float:
    """OECD-modified scale: head=1, each extra adult=0.5, each child under 14=0.3."""
    if not isinstance(n_adults, int) or n_adults < 1:
        raise PreprocessError(f"a household has a head: n_adults must be >= 1, got {n_adults!r}")
    if not isinstance(n_children_under_14, int) or n_children_under_14 < 0:
        raise PreprocessError(f"n_children_under_14 must be >= 0, got {n_children_under_14!r}")
    return 1.0 + 0.5 * (n_adults - 1) + 0.3 * n_children_under_14


def _normalize_country(name: str) -> str:
    import unicodedata

    # curly apostrophes would be dropped by the ascii fold, not spaced
    name = name.translate(str.maketrans({"‘": "'", "’": "'", "ʼ": "'"}))
    folded = unicodedata.normalize("NFKD", name).encode("ascii", "ignore").decode("ascii")
    return re.sub(r"[^a-z0-9]+", " ", folded.casefold()).strip()


_income_cache: dict[str, dict[str, IncomeGroup]] = {}


def load_income_groups(path: Path | str | None = None) -> dict[str, IncomeGroup]:
    """Country -> income group from the bundled (or a custom) two-column CSV."""
    key = str(path) if path is not None else INCOME_TABLE_RESOURCE
    if key in _income_cache:
        return _income_cache[key]
    if path is None:
        source = resources.files("welfare_vision.data").joinpath(INCOME_TABLE_RESOURCE)
        text = source.read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    table: dict[str, IncomeGroup] = {}
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["country", "group"]:
        raise PreprocessError("income-group CSV must have header 'country,group'")
    for row in reader:
        table[row["country"].strip()] = IncomeGroup(row["group"].strip())
    _income_cache[key] = table
    return table


def assign_income_group(country: str, lookup: Mapping[str, IncomeGroup]) -> IncomeGroup:
    """Total over the dataset countries; unknown names fail loudly with candidates."""
    normalized = {_normalize_country(name): group for name, group in lookup.items()}
    wanted = _normalize_country(country)
    if wanted in normalized:
        return normalized[wanted]
    close = difflib.get_close_matches(wanted, normalized.keys(), n=3, cutoff=0.6)
    display = {_normalize_country(name): name for name in lookup}
    raise UnknownCountryError(country, [display[c] for c in close])


@dataclass
class HouseholdRecord:
    """One family ready for labeling and modeling."""

    family_id: str
    country: str
    monthly_consumption_usd: float
    income_group: IncomeGroup | None = None
    log_consumption: float | None = None
    images: dict[str, Path | None] = field(default_factory=dict)
    poverty_label: int | None = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.monthly_consumption_usd) and self.monthly_consumption_usd > 0):
            raise PreprocessError(
                f"monthly_consumption_usd must be positive, got {self.monthly_consumption_usd!r}"
            )
        expected = math.log(self.monthly_consumption_usd)
        if self.log_consumption is None:
            self.log_consumption = expected
        elif abs(self.log_consumption - expected) > 1e-12:
            raise PreprocessError(
                f"log_consumption {self.log_consumption} is not ln({self.monthly_consumption_usd})"
            )


@dataclass(frozen=True)
class PovertyPolicy:
    """Labeling rule: one daily line for everyone, or a line per income group."""

    mode: str
    daily_lines_usd: Mapping[IncomeGroup, float]
    days_per_month: int = DAYS_PER_MONTH

    # World Bank poverty lines by income classification, USD per day
    WORLD_BANK_DAILY_LINES = {
        IncomeGroup.LIC: 1.9,
        IncomeGroup.LMIC: 3.2,
        IncomeGroup.UMIC: 5.5,
        IncomeGroup.HIC: 21.7,
    }

    def __post_init__(self) -> None:
        if self.mode not in ("uniform", "by_income_group"):
            raise PreprocessError(f"unknown policy mode {self.mode!r}")
        lines = dict(self.daily_lines_usd)
        if set(lines) != set(IncomeGroup):
            raise PreprocessError("daily_lines_usd must cover all four income groups")
        for group, line in lines.items():
            if not (math.isfinite(line) and line > 0):
                raise PreprocessError(f"daily line for {group} must be positive, got {line!r}")
        if self.mode == "uniform" and len(set(lines.values())) != 1:
            raise PreprocessError("uniform mode requires one shared daily line")
        object.__setattr__(self, "daily_lines_usd", lines)

    @classmethod
    def uniform(cls, daily_line_usd: float = 1.9) -> "PovertyPolicy":
        return cls(mode="uniform", daily_lines_usd={g: daily_line_usd for g in IncomeGroup})

    @classmethod
    def by_income_group(cls) -> "PovertyPolicy":
        return cls(mode="by_income_group", daily_lines_usd=dict(cls.WORLD_BANK_DAILY_LINES))

    def monthly_cutoff(self, group: IncomeGroup | None = None) -> float:
        if self.mode == "uniform":
            line = next(iter(self.daily_lines_usd.values()))
        else:
            if group is None:
                raise PreprocessError("by_income_group policy needs the household's income group")
            line = self.daily_lines_usd[group]
        return line * self.days_per_month

    def monthly_cutoffs(self) -> dict[IncomeGroup, float]:
        return {g: line * self.days_per_month for g, line in self.daily_lines_usd.items()}


def label_poverty(record: HouseholdRecord, policy: PovertyPolicy) -> int:
    """1 iff consumption does not exceed the applicable monthly cutoff."""
    if policy.mode == "by_income_group" and record.income_group is None:
        raise PreprocessError(
            f"record {record.family_id} has no income_group but policy is by_income_group"
        )
    cutoff = policy.monthly_cutoff(record.income_group)
    return 1 if record.monthly_consumption_usd <= cutoff else 0


def filter_outliers(
    records: Sequence[HouseholdRecord], cap_usd: float = DEFAULT_CAP_USD
) -> list[HouseholdRecord]:
    """Drop households consuming strictly over the cap; order preserved."""
    if not (math.isfinite(cap_usd) and cap_usd > 0):
        raise PreprocessError(f"cap_usd must be positive, got {cap_usd!r}")
    return [r for r in records if r.monthly_consumption_usd <= cap_usd]


@dataclass(frozen=True)
class MosaicSpec:
    """Deterministic 3x3 layout for merging the 7 category images."""

    category_order: tuple[str, ...] = CATEGORIES
    rows: int = 3
    cols: int = 3
    tile_px: int = 224
    fill: tuple[int, int, int] = (255, 255, 255)

    def __post_init__(self) -> None:
        if len(self.category_order) != 7:
            raise PreprocessError("category_order must list exactly the 7 canonical categories")
        if self.tile_px < 1:
            raise PreprocessError("tile_px must be positive")
        if self.rows * self.cols < len(self.category_order):
            raise PreprocessError("grid too small for 7 tiles")

    @property
    def side_px(self) -> int:
        return self.rows * self.tile_px


def build_mosaic(record: HouseholdRecord, spec: MosaicSpec = MosaicSpec()) -> Image.Image:
    """Paste present categories left-to-right, top-to-bottom; absences stay white.

    Tiles are squash-resized to tile_px x tile_px (no letterboxing, so white
    bars can never be mistaken for the absent-category marker).
    """
    present = [c for c in spec.category_order if record.images.get(c)]
    if not present:
        raise EmptyMosaicError(f"record {record.family_id} has no category images")
    canvas = Image.new("RGB", (spec.cols * spec.tile_px, spec.rows * spec.tile_px), spec.fill)
    for position, category in enumerate(spec.category_order):
        path = record.images.get(category)
        if not path:
            continue
        with Image.open(path) as source:
            tile = source.convert("RGB").resize((spec.tile_px, spec.tile_px))
        col, row = position % spec.cols, position // spec.cols
        canvas.paste(tile, (col * spec.tile_px, row * spec.tile_px))
    return canvas


def write_mosaics(
    records: Sequence[HouseholdRecord],
    root: Path | str,
    spec: MosaicSpec = MosaicSpec(),
    skip_empty: bool = True,
) -> dict[str, Path]:
    """Render mosaics to ``{root}/mosaics/{family_id}.png``; returns the path map."""
    out_dir = Path(root) / MOSAICS_DIRNAME
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    for record in records:
        try:
            mosaic = build_mosaic(record, spec)
        except EmptyMosaicError:
            if skip_empty:
                log.warning("skipping %s: no category images for a mosaic", record.family_id)
                continue
            raise
        out_path = out_dir / f"{record.family_id}.png"
        mosaic.save(out_path, format="PNG")
        paths[record.family_id] = out_path
    return paths


def balance_classes(
    records: Sequence[T],
    seed: int,
    label_of: Callable[[T], int] | None = None,
) -> list[T]:
    """All minority samples plus a seeded uniform subset of the majority.

    Output preserves the input ordering, and its size is 2x the minority count.
    """
    if label_of is None:
        label_of = lambda r: r.poverty_label  # noqa: E731
    labels = [label_of(r) for r in records]
    if any(l not in (0, 1) for l in labels):
        raise PreprocessError("balance_classes needs 0/1 labels on every record")
    positives = [i for i, l in enumerate(labels) if l == 1]
    negatives = [i for i, l in enumerate(labels) if l == 0]
    if not positives or not negatives:
        raise PreprocessError(
            f"both classes must be non-empty (got {len(positives)} positive, {len(negatives)} negative)"
        )
    minority, majority = (positives, negatives) if len(positives) <= len(negatives) else (negatives, positives)
    rng = np.random.default_rng(seed)
    sampled = rng.choice(len(majority), size=len(minority), replace=False)
    keep = set(minority) | {majority[i] for i in sampled}
    return [records[i] for i in sorted(keep)]


@dataclass(frozen=True)
class SplitSpec:
    """Seeded 80/20 split; validation size is floor(0.2 * n)."""

    seed: int
    train_fraction: float = 0.8
    stratify_on: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise PreprocessError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


def _valid_count(n: int, train_fraction: float) -> int:
    # round the share first: bare (1 - 0.8) * 450 floats to 89.999..., flooring to 89
    share = round(1.0 - train_fraction, 10)
    return math.floor(share * n)


def split_dataset(records: Sequence[T], spec: SplitSpec) -> tuple[list[T], list[T]]:
    """Disjoint, exhaustive (train, valid) lists; same seed, same membership."""
    n = len(records)
    if n < 2:
        raise PreprocessError(f"need at least 2 records to split, got {n}")
    n_valid = _valid_count(n, spec.train_fraction)
    rng = np.random.default_rng(spec.seed)

    if spec.stratify_on is None:
        valid_idx = set(rng.permutation(n)[:n_valid].tolist())
    else:
        groups: dict[object, list[int]] = {}
        for i, record in enumerate(records):
            groups.setdefault(getattr(record, spec.stratify_on), []).append(i)
        quotas = {key: _valid_count(len(idx), spec.train_fraction) for key, idx in groups.items()}
        deficit = n_valid - sum(quotas.values())
        share = round(1.0 - spec.train_fraction, 10)
        remainders = sorted(
            groups,
            key=lambda key: (-(share * len(groups[key]) - quotas[key]), str(key)),
        )
        for key in remainders[:deficit]:
            quotas[key] += 1
        valid_idx = set()
        for key in sorted(groups, key=str):
            members = groups[key]
            order = rng.permutation(len(members))
            valid_idx.update(members[i] for i in order[: quotas[key]])

    train = [r for i, r in enumerate(records) if i not in valid_idx]
    valid = [r for i, r in enumerate(records) if i in valid_idx]
    return train, valid


def records_from_manifest(
    manifest: DatasetManifest,
    lookup: Mapping[str, IncomeGroup] | None = None,
    images_root: Path | str | None = None,
) -> list[HouseholdRecord]:
    """Manifest rows -> household records, resolving relative asset paths."""
    lookup = lookup if lookup is not None else load_income_groups()
    images_root = Path(images_root) if images_root is not None else None
    records = []
    for entry in manifest.households:
        images: dict[str, Path | None] = {}
        for category, ref in entry.assets.items():
            if ref is None:
                images[category] = None
            else:
                path = Path(ref.path)
                if images_root is not None and not path.is_absolute():
                    path = images_root / path
                images[category] = path
        records.append(
            HouseholdRecord(
                family_id=entry.family_id,
                country=entry.country,
                monthly_consumption_usd=entry.monthly_consumption_usd,
                income_group=assign_income_group(entry.country, lookup),
                images=images,
            )
        )
    return records


@dataclass
class PreprocessSummary:
    n_input: int
    n_kept: int
    n_dropped_outliers: int
    category_counts: dict[str, int]
    n_poor: int
    n_nonpoor: int
    labeled_path: Path | None = None
    mosaics_dir: Path | None = None

    def counts_in_canonical_order(self) -> list[int]:
        """Per-category household counts in canonical order, then merged."""
        ordered = [self.category_counts[c] for c in CATEGORIES]
        ordered.append(self.category_counts["merged"])
        return ordered


def summarize_records(records: Sequence[HouseholdRecord]) -> dict[str, int]:
    counts = {c: sum(1 for r in records if r.images.get(c)) for c in CATEGORIES}
    counts["merged"] = len(records)
    return counts


def run_preprocess(
    manifest_path: Path | str,
    policy: PovertyPolicy,
    out_root: Path | str,
    cap_usd: float = DEFAULT_CAP_USD,
    seed: int = 42,
    tile_px: int = 224,
    lookup: Mapping[str, IncomeGroup] | None = None,
    build_mosaics: bool = True,
) -> PreprocessSummary:
    """Manifest -> labeled.jsonl (+ mosaics/) under ``out_root``.

    Each output row extends its manifest row with log_consumption,
    income_group, poverty_label and a seeded household-level split_assignment.
    """
    manifest_path = Path(manifest_path)
    out_root = Path(out_root)
    manifest = read_manifest(manifest_path)
    records = records_from_manifest(manifest, lookup=lookup, images_root=manifest_path.parent)

    kept = filter_outliers(records, cap_usd=cap_usd)
    n_dropped = len(records) - len(kept)
    for record in kept:
        record.poverty_label = label_poverty(record, policy)

    counts = summarize_records(kept)
    log.info(
        "category sample counts (canonical order, merged last): %s",
        [counts[c] for c in CATEGORIES] + [counts["merged"]],
    )

    assignments: dict[str, str] = {}
    if len(kept) >= 2:
        train, valid = split_dataset(kept, SplitSpec(seed=seed))
        valid_ids = {r.family_id for r in valid}
        assignments = {r.family_id: ("valid" if r.family_id in valid_ids else "train") for r in kept}

    mosaics_dir = None
    if build_mosaics:
        spec = MosaicSpec(tile_px=tile_px)
        write_mosaics(kept, out_root, spec)
        mosaics_dir = out_root / MOSAICS_DIRNAME

    entries_by_id = {entry.family_id: entry for entry in manifest.households}
    out_root.mkdir(parents=True, exist_ok=True)
    labeled_path = out_root / LABELED_FILENAME
    header = {
        "schema_version": 1,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "source_manifest_hash": manifest.manifest_hash,
        "policy_mode": policy.mode,
        "cap_usd": cap_usd,
        "seed": seed,
    }
    with open(labeled_path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(header, sort_keys=True) + "\n")
        for record in kept:
            row = entries_by_id[record.family_id].as_dict()
            # asset paths in the manifest are relative to its own directory;
            # rebase them on out_root so the labeled file resolves on its own
            for category, ref in row["assets"].items():
                if ref is None:
                    continue
                resolved = Path(ref["path"])
                if not resolved.is_absolute():
                    resolved = manifest_path.parent / resolved
                ref["path"] = os.path.relpath(resolved, out_root)
            row["log_consumption"] = record.log_consumption
            row["income_group"] = record.income_group.value if record.income_group else None
            row["poverty_label"] = record.poverty_label
            row["split_assignment"] = assignments.get(record.family_id)
            handle.write(json.dumps(row, sort_keys=True) + "\n")

    n_poor = sum(1 for r in kept if r.poverty_label == 1)
    return PreprocessSummary(
        n_input=len(records),
        n_kept=len(kept),
        n_dropped_outliers=n_dropped,
        category_counts=counts,
        n_poor=n_poor,
        n_nonpoor=len(kept) - n_poor,
        labeled_path=labeled_path,
        mosaics_dir=mosaics_dir,
    )


def read_labeled_dataset(path: Path | str) -> tuple[dict, list[HouseholdRecord], dict[str, str]]:
    """Load labeled.jsonl: (header, records, split assignments by family_id)."""
    path = Path(path)
    with open(path, encoding="utf-8") as handle:
        lines = [line for line in handle if line.strip()]
    if not lines:
        raise PreprocessError(f"{path} is empty")
    header = json.loads(lines[0])
    records = []
    assignments: dict[str, str] = {}
    for line in lines[1:]:
        raw = json.loads(line)
        images: dict[str, Path | None] = {}
        for category, ref in raw["assets"].items():
            if ref is None:
                images[category] = None
            else:
                asset_path = Path(ref["path"])
                if not asset_path.is_absolute():
                    asset_path = path.parent / asset_path
                images[category] = asset_path
        record = HouseholdRecord(
            family_id=raw["family_id"],
            country=raw["country"],
            monthly_consumption_usd=raw["monthly_consumption_usd"],
            income_group=IncomeGroup(raw["income_group"]) if raw.get("income_group") else None,
            images=images,
            poverty_label=raw.get("poverty_label"),
        )
        records.append(record)
        if raw.get("split_assignment"):
            assignments[record.family_id] = raw["split_assignment"]
    return header, records, assignments
