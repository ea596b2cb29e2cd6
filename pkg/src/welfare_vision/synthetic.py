"""Seeded synthetic data with known generating functions.

Two families of fixtures:

* brightness datasets, where the regression target (or class label) is a
  known function of mean tile brightness — the generator itself is the
  oracle for end-to-end training tests;
* an on-disk mirror of a family-index website, for exercising the scraper
  without network access.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .manifest import CATEGORIES
from .modeling import LabeledImage
from .preprocess import HouseholdRecord, MosaicSpec, build_mosaic

TILES_DIRNAME = "tiles"


@dataclass(frozen=True)
class BrightnessOracle:
    """Affine map from mean tile brightness to the regression target."""

    low_brightness: float = 25.0
    high_brightness: float = 230.0
    low_target: float = 2.0
    high_target: float = 8.0

    def target_for(self, brightness: float) -> float:
        span = self.high_brightness - self.low_brightness
        unit = (brightness - self.low_brightness) / span
        return self.low_target + unit * (self.high_target - self.low_target)

    @property
    def target_range(self) -> float:
        return self.high_target - self.low_target

    @property
    def noise_sigma(self) -> float:
        return 0.05 * self.target_range


def _write_tile(path: Path, brightness: float, rng: np.random.Generator, px: int) -> None:
    base = np.full((px, px, 3), brightness, dtype=np.float64)
    textured = base + rng.normal(0.0, 3.0, size=base.shape)
    Image.fromarray(np.clip(textured, 0, 255).astype(np.uint8)).save(path, format="JPEG", quality=92)


def _mosaic_sample(
    out_dir: Path,
    name: str,
    brightness: float,
    rng: np.random.Generator,
    spec: MosaicSpec,
) -> Path:
    tiles_dir = out_dir / TILES_DIRNAME
    tiles_dir.mkdir(parents=True, exist_ok=True)
    tile_path = tiles_dir / f"{name}.jpg"
    _write_tile(tile_path, brightness, rng, spec.tile_px)
    # every category points at the same tile, so brightness is exact
    record = HouseholdRecord(
        family_id=name,
        country="synthetic",
        monthly_consumption_usd=1.0,
        images={category: tile_path for category in CATEGORIES},
    )
    mosaic_path = out_dir / f"{name}.png"
    build_mosaic(record, spec).save(mosaic_path, format="PNG")
    return mosaic_path


def make_regression_mosaics(
    out_dir: Path | str,
    n: int = 400,
    seed: int = 7,
    tile_px: int = 64,
    oracle: BrightnessOracle = BrightnessOracle(),
) -> list[LabeledImage]:
    """Mosaics whose target is affine in brightness plus 5%-of-range noise."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    spec = MosaicSpec(tile_px=tile_px)
    samples = []
    for i in range(n):
        brightness = rng.uniform(oracle.low_brightness, oracle.high_brightness)
        path = _mosaic_sample(out_dir, f"sample-{i:04d}", brightness, rng, spec)
        target = oracle.target_for(brightness) + rng.normal(0.0, oracle.noise_sigma)
        samples.append(LabeledImage(path=path, target=target, family_id=f"sample-{i:04d}"))
    return samples


def make_classification_mosaics(
    out_dir: Path | str,
    n: int = 120,
    seed: int = 7,
    tile_px: int = 64,
) -> list[LabeledImage]:
    """Brightness-separable two-class mosaics: dark = poor (1), bright = 0."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    spec = MosaicSpec(tile_px=tile_px)
    samples = []
    for i in range(n):
        label = i % 2
        brightness = rng.uniform(25.0, 85.0) if label == 1 else rng.uniform(170.0, 230.0)
        path = _mosaic_sample(out_dir, f"sample-{i:04d}", brightness, rng, spec)
        samples.append(LabeledImage(path=path, target=float(label), family_id=f"sample-{i:04d}"))
    return samples


@dataclass(frozen=True)
class FixtureFamily:
    family_id: str
    country: str
    monthly_consumption_usd: float
    categories: tuple[str, ...]


@dataclass
class FixtureMirror:
    root: Path
    families: list[FixtureFamily] = field(default_factory=list)
    corrupt_relpaths: list[str] = field(default_factory=list)

    @property
    def n_assets(self) -> int:
        return sum(len(f.categories) for f in self.families)


_FIXTURE_COUNTRIES = (
    "Burundi",
    "France",
    "India",
    "Cote d'Ivoire",
    "Malawi",
    "United States",
    "Indonesia",
    "Mexico",
)


def _asset_pixels(family_index: int, category_index: int, px: int = 24) -> Image.Image:
    rng = np.random.default_rng(1000 * family_index + category_index)
    base = np.array(
        [40 * (category_index % 6) + 15, 30 * (family_index % 8) + 10, 90], dtype=np.float64
    )
    pixels = base[None, None, :] + rng.normal(0, 8, size=(px, px, 3))
    return Image.fromarray(np.clip(pixels, 0, 255).astype(np.uint8))


def make_fixture_mirror(
    root: Path | str,
    n_families: int = 8,
    corrupt_asset: bool = False,
) -> FixtureMirror:
    """Write a browsable family-index site into ``root``.

    Layout: ``index.html`` linking ``families/<id>.html`` pages, each with
    country and consumption spans and one image per category under
    ``assets/``. Family 2 is missing its stoves image, family 1 consumes
    over the $5000 outlier cap, and family 0 sits under the $57 uniform
    cutoff, so downstream filters all have work to do. With
    ``corrupt_asset=True`` the first image of the last family is truncated
    garbage, for quarantine-path tests.
    """
    root = Path(root)
    (root / "families").mkdir(parents=True, exist_ok=True)
    (root / "assets").mkdir(parents=True, exist_ok=True)
    mirror = FixtureMirror(root=root)

    consumptions = [45.50, 6500.00, 820.25, 130.00, 57.00, 2400.75, 310.10, 96.00]
    links = []
    for i in range(n_families):
        family_id = f"family-{i:03d}"
        country = _FIXTURE_COUNTRIES[i % len(_FIXTURE_COUNTRIES)]
        consumption = consumptions[i % len(consumptions)]
        categories = tuple(c for c in CATEGORIES if not (i == 2 and c == "stoves"))

        images_html = []
        for j, category in enumerate(categories):
            rel = f"assets/{family_id}-{category}.jpg"
            asset_path = root / rel
            if corrupt_asset and i == n_families - 1 and j == 0:
                asset_path.write_bytes(b"\xff\xd8\xff\xe0 not a real jpeg")
                mirror.corrupt_relpaths.append(rel)
            else:
                _asset_pixels(i, j).save(asset_path, format="JPEG", quality=90)
            images_html.append(
                f'    <img class="asset" data-category="{category}" src="../{rel}">'
            )

        page = "\n".join(
            [
                "<html><body>",
                f'  <h1>{family_id}</h1>',
                f'  <span class="country">{country}</span>',
                f'  <span class="consumption">{consumption:.2f}</span>',
                *images_html,
                "</body></html>",
            ]
        )
        (root / "families" / f"{family_id}.html").write_text(page, encoding="utf-8")
        links.append(f'  <a class="family" href="families/{family_id}.html">{family_id}</a>')
        mirror.families.append(
            FixtureFamily(
                family_id=family_id,
                country=country,
                monthly_consumption_usd=consumption,
                categories=categories,
            )
        )

    index = "\n".join(["<html><body>", *links, "</body></html>"])
    (root / "index.html").write_text(index, encoding="utf-8")
    return mirror


def within_noise_band(value: float, target: float, oracle: BrightnessOracle, k: float = 4.0) -> bool:
    """True when value sits within k noise standard deviations of target."""
    return math.isfinite(value) and abs(value - target) <= k * oracle.noise_sigma
