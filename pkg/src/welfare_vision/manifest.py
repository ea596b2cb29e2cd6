"""Dataset manifest: the persisted, content-addressed inventory of households.

Wire format is JSON lines. The first line is a header object carrying
``schema_version``, ``created_at`` and ``manifest_hash``; every following
line is one household row::

    {"family_id": ..., "country": ..., "monthly_consumption_usd": ...,
     "assets": {"stoves": {"path": ..., "hash": ..., "bytes": ...}, "showers": null, ...}}

Missing categories are explicit ``null`` markers. ``manifest_hash`` covers
the rows only, so re-running an idempotent scrape never changes it.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

CATEGORIES = (
    "bathrooms",
    "bedrooms",
    "living-rooms",
    "places-for-dinner",
    "roofs",
    "showers",
    "stoves",
)

SCHEMA_VERSION = 1
QUARANTINE_DIRNAME = "quarantine"
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")

_FAMILY_ID_RE = re.compile(r"[A-Za-z0-9-]+")


class ManifestError(ValueError):
    pass


class OrphanAssetError(ManifestError):
    """An asset references a family_id that appears in no household meta."""

    def __init__(self, orphans: Sequence[str]):
        self.orphans = tuple(sorted(set(orphans)))
        super().__init__(f"assets reference unknown families: {', '.join(self.orphans)}")


class ManifestIntegrityError(ManifestError):
    """Stored manifest_hash does not match the recomputed row hash."""


@dataclass(frozen=True)
class HouseholdMeta:
    """Identity and consumption for one family, as scraped."""

    family_id: str
    country: str
    monthly_consumption_usd: float

    def __post_init__(self) -> None:
        if not _FAMILY_ID_RE.fullmatch(self.family_id or ""):
            raise ValueError(f"family_id must match [A-Za-z0-9-]+, got {self.family_id!r}")
        if not self.country or not self.country.strip():
            raise ValueError("country must be non-empty")
        consumption = self.monthly_consumption_usd
        if not (isinstance(consumption, (int, float)) and math.isfinite(consumption) and consumption > 0):
            raise ValueError(f"monthly_consumption_usd must be a positive real, got {consumption!r}")


@dataclass(frozen=True)
class RawImageAsset:
    """One downloaded image file plus its provenance."""

    family_id: str
    category: str
    remote_url: str
    local_path: Path
    content_hash: str
    byte_size: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "local_path", Path(self.local_path))
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.byte_size < 0:
            raise ValueError("byte_size must be non-negative")


@dataclass(frozen=True)
class AssetRef:
    path: str
    hash: str
    bytes: int

    def as_dict(self) -> dict:
        return {"path": self.path, "hash": self.hash, "bytes": self.bytes}


@dataclass(frozen=True)
class HouseholdEntry:
    """One manifest row: a household and its per-category asset references."""

    family_id: str
    country: str
    monthly_consumption_usd: float
    assets: Mapping[str, AssetRef | None]

    def as_dict(self) -> dict:
        return {
            "family_id": self.family_id,
            "country": self.country,
            "monthly_consumption_usd": self.monthly_consumption_usd,
            "assets": {cat: (ref.as_dict() if ref else None) for cat, ref in self.assets.items()},
        }


def _canonical_row(entry: HouseholdEntry) -> str:
    return json.dumps(entry.as_dict(), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable, content-addressed inventory of households and assets."""

    households: tuple[HouseholdEntry, ...]
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "households", tuple(sorted(self.households, key=lambda h: h.family_id))
        )

    def __len__(self) -> int:
        return len(self.households)

    @property
    def manifest_hash(self) -> str:
        digest = hashlib.sha256()
        for entry in self.households:
            digest.update(_canonical_row(entry).encode("utf-8"))
            digest.update(b"\n")
        return digest.hexdigest()

    def unique_blobs(self) -> dict[str, list[tuple[str, str]]]:
        """Group asset refs by content hash: one stored blob per hash, N refs."""
        blobs: dict[str, list[tuple[str, str]]] = {}
        for entry in self.households:
            for category, ref in entry.assets.items():
                if ref is not None:
                    blobs.setdefault(ref.hash, []).append((entry.family_id, category))
        return blobs

    def categories(self) -> tuple[str, ...]:
        if not self.households:
            return ()
        return tuple(self.households[0].assets.keys())


def build_manifest(
    assets: Iterable[RawImageAsset],
    metas: Iterable[HouseholdMeta],
    categories: Sequence[str] = CATEGORIES,
    root: Path | None = None,
) -> DatasetManifest:
    """Assemble one row per household; missing categories get explicit null refs.

    ``root``, when given, makes stored asset paths relative to it. A category
    with several assets keeps the lowest-indexed file (sorted path order).
    """
    assets = list(assets)
    metas = list(metas)
    seen: dict[str, HouseholdMeta] = {}
    for meta in metas:
        if meta.family_id in seen:
            raise ManifestError(f"duplicate family_id in metas: {meta.family_id}")
        seen[meta.family_id] = meta

    orphans = [a.family_id for a in assets if a.family_id not in seen]
    if orphans:
        raise OrphanAssetError(orphans)

    by_household: dict[str, dict[str, RawImageAsset]] = {fid: {} for fid in seen}
    for asset in sorted(assets, key=lambda a: str(a.local_path)):
        slot = by_household[asset.family_id]
        slot.setdefault(asset.category, asset)

    ordered_categories = tuple(c for c in CATEGORIES if c in categories)
    rows = []
    for family_id, meta in seen.items():
        refs: dict[str, AssetRef | None] = {}
        for category in ordered_categories:
            asset = by_household[family_id].get(category)
            if asset is None:
                refs[category] = None
            else:
                path = asset.local_path
                if root is not None:
                    try:
                        path = path.relative_to(root)
                    except ValueError:
                        pass
                refs[category] = AssetRef(
                    path=path.as_posix(), hash=asset.content_hash, bytes=asset.byte_size
                )
        rows.append(
            HouseholdEntry(
                family_id=family_id,
                country=meta.country,
                monthly_consumption_usd=meta.monthly_consumption_usd,
                assets=refs,
            )
        )
    return DatasetManifest(households=tuple(rows))


def write_manifest(manifest: DatasetManifest, path: Path | str) -> Path:
    """Persist as JSON lines. A file with the same row hash is left untouched,
    so resumed runs keep a byte-identical tree."""
    path = Path(path)
    new_hash = manifest.manifest_hash
    if path.exists():
        try:
            existing = read_manifest(path)
            if existing.manifest_hash == new_hash:
                return path
        except (ManifestError, json.JSONDecodeError, OSError):
            pass
    header = {
        "schema_version": manifest.schema_version,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "manifest_hash": new_hash,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(header, sort_keys=True) + "\n")
        for entry in manifest.households:
            handle.write(_canonical_row(entry) + "\n")
    return path


def read_manifest(path: Path | str) -> DatasetManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as handle:
        lines = [line for line in handle if line.strip()]
    if not lines:
        raise ManifestError(f"{path} is empty")
    header = json.loads(lines[0])
    if "manifest_hash" not in header:
        raise ManifestError(f"{path} has no header line")
    rows = []
    for line in lines[1:]:
        raw = json.loads(line)
        assets = {
            cat: (AssetRef(**ref) if ref is not None else None)
            for cat, ref in raw["assets"].items()
        }
        rows.append(
            HouseholdEntry(
                family_id=raw["family_id"],
                country=raw["country"],
                monthly_consumption_usd=raw["monthly_consumption_usd"],
                assets=assets,
            )
        )
    manifest = DatasetManifest(households=tuple(rows), schema_version=header["schema_version"])
    if manifest.manifest_hash != header["manifest_hash"]:
        raise ManifestIntegrityError(
            f"{path}: stored hash {header['manifest_hash'][:12]}... does not match rows"
        )
    return manifest


def verify_output_tree(manifest: DatasetManifest, root: Path | str) -> list[Path]:
    """Return image files under ``root`` that are neither referenced by a
    manifest row nor quarantined. An empty list means the tree is complete."""
    root = Path(root)
    referenced = set()
    for entry in manifest.households:
        for ref in entry.assets.values():
            if ref is not None:
                path = Path(ref.path)
                referenced.add(path if path.is_absolute() else root / path)
    strays = []
    for candidate in sorted(root.rglob("*")):
        if not candidate.is_file() or candidate.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if QUARANTINE_DIRNAME in candidate.relative_to(root).parts:
            continue
        if candidate not in referenced:
            strays.append(candidate)
    return strays
