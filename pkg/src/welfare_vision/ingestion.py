"""Scraper and downloader for Dollar-Street-style household image mirrors.

The source (live site or a local fixture mirror) is expected to serve:

* ``{base}/index.html`` with one ``<a class="family" href="families/<id>.html">``
  anchor per household, and
* per-family pages containing ``<span class="country">``,
  ``<span class="consumption">`` (USD per adult equivalent per month) and one
  ``<img class="asset" data-category="stoves" src="...">`` tag per image.

Downloaded files are named by :func:`encode_asset_filename` so consumption,
country, family id, category and index all survive in the filename alone and
can be recovered with :func:`parse_asset_filename`.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import re
import threading
import time
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence
from urllib.parse import urljoin, urlparse

import requests
from PIL import Image, UnidentifiedImageError

from .manifest import (
    CATEGORIES,
    QUARANTINE_DIRNAME,
    DatasetManifest,
    HouseholdMeta,
    RawImageAsset,
    build_manifest,
    write_manifest,
)

log = logging.getLogger(__name__)

SEPARATOR = "__"
IMAGES_DIRNAME = "images"
MANIFEST_FILENAME = "manifest.jsonl"
ERRORS_FILENAME = "errors.jsonl"

_SAFE_FIELD_RE = re.compile(r"[A-Za-z0-9-]+")
_FILENAME_RE = re.compile(
    r"^(?P<consumption>\d+\.\d{2})__"
    r"(?P<country>[A-Za-z0-9-]+)__"
    r"(?P<family_id>[A-Za-z0-9-]+)__"
    r"(?P<category>[a-z-]+)__"
    r"(?P<index>\d{2})\.jpg$"
)


class IngestionError(Exception):
    pass


class NetworkUnreachableError(IngestionError):
    """Connection-level failure that persisted through retries; safe to retry later."""

    retryable = True


class AssetDownloadError(IngestionError):
    """Asset-level failure (bad status, exhausted retries); recorded, never fatal."""


class CorruptImageError(AssetDownloadError):
    """Response bytes do not decode as an image; the payload was quarantined."""


class FilenameError(ValueError):
    pass


class FilenameParseError(FilenameError):
    def __init__(self, name: str, position: int, reason: str):
        self.name = name
        self.position = position
        super().__init__(f"cannot parse {name!r} at position {position}: {reason}")


class ParsedAssetName(NamedTuple):
    consumption: float
    country: str
    family_id: str
    category: str
    index: int


def sanitize_country(country: str) -> str:
    """ASCII-fold and hyphenate a country name for use as a filename field."""
    folded = unicodedata.normalize("NFKD", country).encode("ascii", "ignore").decode("ascii")
    hyphenated = re.sub(r"\s+", "-", folded.strip())
    cleaned = re.sub(r"[^A-Za-z0-9-]", "", hyphenated)
    cleaned = re.sub(r"-{2,}", "-", cleaned).strip("-")
    if not cleaned:
        raise FilenameError(f"country {country!r} has no representable characters after sanitization")
    return cleaned


def encode_asset_filename(meta: HouseholdMeta, category: str, index: int) -> str:
    """``{consumption:.2f}__{country}__{family_id}__{category}__{index:02d}.jpg``"""
    if category not in CATEGORIES:
        raise FilenameError(f"unknown category {category!r}; valid slugs: {', '.join(CATEGORIES)}")
    if not isinstance(index, int) or not 0 <= index <= 99:
        raise FilenameError(f"index must be an integer in [0, 99], got {index!r}")
    country = sanitize_country(meta.country)
    if not _SAFE_FIELD_RE.fullmatch(meta.family_id):
        raise FilenameError(f"family_id {meta.family_id!r} contains unrepresentable characters")
    return f"{meta.monthly_consumption_usd:.2f}{SEPARATOR}{country}{SEPARATOR}{meta.family_id}{SEPARATOR}{category}{SEPARATOR}{index:02d}.jpg"


def parse_asset_filename(name: str) -> ParsedAssetName:
    """Exact inverse of :func:`encode_asset_filename` over its image."""
    match = _FILENAME_RE.match(name)
    if match is None:
        # locate the first segment that breaks the grammar for the error message
        position = 0
        parts = name.split(SEPARATOR)
        checks = [
            (r"\d+\.\d{2}", "expected a 2-decimal consumption value"),
            (r"[A-Za-z0-9-]+", "expected a sanitized country name"),
            (r"[A-Za-z0-9-]+", "expected a family id"),
            (r"[a-z-]+", "expected a category slug"),
            (r"\d{2}\.jpg", "expected a 2-digit index followed by .jpg"),
        ]
        for i, (pattern, reason) in enumerate(checks):
            if i >= len(parts) or not re.fullmatch(pattern, parts[i]):
                raise FilenameParseError(name, position, reason)
            position += len(parts[i]) + len(SEPARATOR)
        raise FilenameParseError(name, 0, "expected 5 fields separated by '__'")
    category = match.group("category")
    if category not in CATEGORIES:
        raise FilenameParseError(name, match.start("category"), f"unknown category {category!r}")
    return ParsedAssetName(
        consumption=float(match.group("consumption")),
        country=match.group("country"),
        family_id=match.group("family_id"),
        category=category,
        index=int(match.group("index")),
    )


@dataclass
class ScrapeConfig:
    """Knobs for one scrape run against a base URL."""

    base_url: str
    output_root: Path
    categories: Sequence[str] = CATEGORIES
    max_concurrent: int = 4
    min_request_interval_ms: int = 0
    resume: bool = True
    retries: int = 3
    retry_backoff_s: float = 0.2
    timeout_s: float = 10.0

    def __post_init__(self) -> None:
        self.output_root = Path(self.output_root)
        self.categories = tuple(self.categories)
        if not self.categories:
            raise IngestionError("categories must be non-empty")
        unknown = [c for c in self.categories if c not in CATEGORIES]
        if unknown:
            raise IngestionError(
                f"unknown categories {unknown}; valid slugs: {', '.join(CATEGORIES)}"
            )
        if self.max_concurrent < 1:
            raise IngestionError(f"max_concurrent must be >= 1, got {self.max_concurrent}")
        if self.min_request_interval_ms < 0:
            raise IngestionError("min_request_interval_ms must be non-negative")

    @property
    def images_dir(self) -> Path:
        return self.output_root / IMAGES_DIRNAME

    @property
    def quarantine_dir(self) -> Path:
        return self.output_root / QUARANTINE_DIRNAME


class HostRateLimiter:
    """Keeps request start times on the same host at least ``interval_ms`` apart.

    Thread-safe: each acquire reserves the next start slot under a lock, then
    sleeps outside it, so concurrent workers queue up rather than stampede.
    """

    def __init__(self, interval_ms: int):
        self._interval = interval_ms / 1000.0
        self._lock = threading.Lock()
        self._next_start: dict[str, float] = {}

    def acquire(self, host: str) -> None:
        if self._interval <= 0:
            return
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next_start.get(host, 0.0))
            self._next_start[host] = start + self._interval
        delay = start - time.monotonic()
        if delay > 0:
            time.sleep(delay)


def _fetch(
    url: str,
    config: ScrapeConfig,
    limiter: HostRateLimiter,
    session: requests.Session,
) -> requests.Response:
    """GET with per-host rate limiting and retries on connection errors / 5xx."""
    host = urlparse(url).netloc
    last_exc: Exception | None = None
    for attempt in range(config.retries + 1):
        limiter.acquire(host)
        try:
            response = session.get(url, timeout=config.timeout_s)
        except (requests.ConnectionError, requests.Timeout) as exc:
            last_exc = exc
            if attempt < config.retries:
                time.sleep(config.retry_backoff_s * (attempt + 1))
            continue
        if response.status_code >= 500:
            last_exc = AssetDownloadError(f"HTTP {response.status_code} for {url}")
            if attempt < config.retries:
                time.sleep(config.retry_backoff_s * (attempt + 1))
            continue
        if response.status_code >= 400:
            raise AssetDownloadError(f"HTTP {response.status_code} for {url}")
        return response
    if isinstance(last_exc, AssetDownloadError):
        raise last_exc
    raise NetworkUnreachableError(
        f"{url} unreachable after {config.retries + 1} attempts"
    ) from last_exc


_FAMILY_LINK_RE = re.compile(r'<a[^>]*class="[^"]*\bfamily\b[^"]*"[^>]*href="([^"]+)"', re.I)
_COUNTRY_RE = re.compile(r'<span[^>]*class="[^"]*\bcountry\b[^"]*"[^>]*>([^<]+)</span>', re.I)
_CONSUMPTION_RE = re.compile(
    r'<span[^>]*class="[^"]*\bconsumption\b[^"]*"[^>]*>([^<]+)</span>', re.I
)
_ASSET_IMG_RE = re.compile(r'<img[^>]*class="[^"]*\basset\b[^"]*"[^>]*>', re.I)
_ATTR_RE = {
    "data-category": re.compile(r'data-category="([^"]+)"', re.I),
    "src": re.compile(r'src="([^"]+)"', re.I),
}


class _PageParseError(IngestionError):
    pass


def _parse_family_page(html: str, family_id: str, page_url: str) -> tuple[HouseholdMeta, list[tuple[str, str]]]:
    country_match = _COUNTRY_RE.search(html)
    consumption_match = _CONSUMPTION_RE.search(html)
    if country_match is None or consumption_match is None:
        raise _PageParseError(f"{page_url}: missing country or consumption span")
    try:
        consumption = float(consumption_match.group(1).strip().replace(",", ""))
    except ValueError as exc:
        raise _PageParseError(f"{page_url}: consumption is not a number") from exc
    meta = HouseholdMeta(
        family_id=family_id,
        country=country_match.group(1).strip(),
        monthly_consumption_usd=consumption,
    )
    assets = []
    for tag in _ASSET_IMG_RE.findall(html):
        category_match = _ATTR_RE["data-category"].search(tag)
        src_match = _ATTR_RE["src"].search(tag)
        if category_match is None or src_match is None:
            continue
        assets.append((category_match.group(1), urljoin(page_url, src_match.group(1))))
    return meta, assets


def scrape_family_index(
    config: ScrapeConfig,
    session: requests.Session | None = None,
    limiter: HostRateLimiter | None = None,
) -> list[tuple[HouseholdMeta, list[tuple[str, str]]]]:
    """Discover families and their asset URLs for the requested categories.

    Malformed family pages are skipped with a logged diagnostic; only an
    unreachable index aborts the scrape. Results are ordered by family_id.
    """
    session = session or requests.Session()
    limiter = limiter or HostRateLimiter(config.min_request_interval_ms)
    index_url = urljoin(config.base_url.rstrip("/") + "/", "index.html")
    index_html = _fetch(index_url, config, limiter, session).text

    hrefs = sorted(set(_FAMILY_LINK_RE.findall(index_html)))
    if not hrefs:
        log.warning("index page %s lists no families", index_url)

    def fetch_one(href: str):
        family_id = Path(urlparse(href).path).stem
        page_url = urljoin(index_url, href)
        try:
            html = _fetch(page_url, config, limiter, session).text
            meta, assets = _parse_family_page(html, family_id, page_url)
        except (_PageParseError, AssetDownloadError, ValueError) as exc:
            log.warning("skipping family page %s: %s", page_url, exc)
            return None
        wanted = [
            (category, url) for category, url in assets if category in config.categories
        ]
        # canonical category order, then page order within a category
        wanted.sort(key=lambda item: (config.categories.index(item[0])))
        return meta, wanted

    with ThreadPoolExecutor(max_workers=config.max_concurrent) as pool:
        results = [r for r in pool.map(fetch_one, hrefs) if r is not None]
    results.sort(key=lambda item: item[0].family_id)
    return results


def _hash_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def download_asset(
    asset_url: str,
    meta: HouseholdMeta,
    category: str,
    config: ScrapeConfig,
    index: int = 1,
    session: requests.Session | None = None,
    limiter: HostRateLimiter | None = None,
) -> RawImageAsset:
    """Fetch one image to its canonical filename under ``output_root/images``.

    With ``resume=True`` an existing file short-circuits the network entirely;
    undecodable payloads land in the quarantine directory and raise
    :class:`CorruptImageError`.
    """
    filename = encode_asset_filename(meta, category, index)
    local_path = config.images_dir / filename
    if config.resume and local_path.exists():
        payload = local_path.read_bytes()
        return RawImageAsset(
            family_id=meta.family_id,
            category=category,
            remote_url=asset_url,
            local_path=local_path,
            content_hash=_hash_bytes(payload),
            byte_size=len(payload),
        )

    session = session or requests.Session()
    limiter = limiter or HostRateLimiter(config.min_request_interval_ms)
    response = _fetch(asset_url, config, limiter, session)
    payload = response.content
    try:
        Image.open(io.BytesIO(payload)).verify()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        config.quarantine_dir.mkdir(parents=True, exist_ok=True)
        (config.quarantine_dir / filename).write_bytes(payload)
        raise CorruptImageError(
            f"{asset_url} does not decode as an image; payload quarantined as {filename}"
        ) from exc

    config.images_dir.mkdir(parents=True, exist_ok=True)
    tmp_path = local_path.with_suffix(".part")
    tmp_path.write_bytes(payload)
    os.replace(tmp_path, local_path)
    return RawImageAsset(
        family_id=meta.family_id,
        category=category,
        remote_url=asset_url,
        local_path=local_path,
        content_hash=_hash_bytes(payload),
        byte_size=len(payload),
    )


@dataclass
class AssetErrorRecord:
    family_id: str
    category: str
    url: str
    error: str

    def as_dict(self) -> dict:
        return {
            "family_id": self.family_id,
            "category": self.category,
            "url": self.url,
            "error": self.error,
        }


@dataclass
class ScrapeResult:
    manifest: DatasetManifest
    manifest_path: Path
    errors: list[AssetErrorRecord] = field(default_factory=list)
    n_downloaded: int = 0
    n_resumed: int = 0


def run_scrape(config: ScrapeConfig, session: requests.Session | None = None) -> ScrapeResult:
    """Full crawl: index -> downloads -> manifest under ``output_root``.

    Only the first image per (family, category) is downloaded; extra URLs are
    logged and skipped so each manifest row holds at most one ref per category.
    Asset failures never abort the crawl; they are written to errors.jsonl.
    """
    session = session or requests.Session()
    limiter = HostRateLimiter(config.min_request_interval_ms)
    index = scrape_family_index(config, session=session, limiter=limiter)

    tasks: list[tuple[HouseholdMeta, str, str]] = []
    for meta, asset_urls in index:
        seen_categories = set()
        for category, url in asset_urls:
            if category in seen_categories:
                log.info("family %s has extra %s images; keeping the first", meta.family_id, category)
                continue
            seen_categories.add(category)
            tasks.append((meta, category, url))

    errors: list[AssetErrorRecord] = []
    assets: list[RawImageAsset] = []
    errors_lock = threading.Lock()
    pre_existing = {p.name for p in config.images_dir.glob("*.jpg")} if config.images_dir.exists() else set()
    n_resumed = 0

    def worker(task: tuple[HouseholdMeta, str, str]) -> RawImageAsset | None:
        meta, category, url = task
        try:
            return download_asset(
                url, meta, category, config, index=1, session=session, limiter=limiter
            )
        except (AssetDownloadError, NetworkUnreachableError) as exc:
            with errors_lock:
                errors.append(
                    AssetErrorRecord(
                        family_id=meta.family_id, category=category, url=url, error=str(exc)
                    )
                )
            return None

    with ThreadPoolExecutor(max_workers=config.max_concurrent) as pool:
        for asset in pool.map(worker, tasks):
            if asset is not None:
                assets.append(asset)
                if config.resume and asset.local_path.name in pre_existing:
                    n_resumed += 1

    manifest = build_manifest(
        assets, [meta for meta, _ in index], categories=config.categories, root=config.output_root
    )
    config.output_root.mkdir(parents=True, exist_ok=True)
    manifest_path = write_manifest(manifest, config.output_root / MANIFEST_FILENAME)

    errors_path = config.output_root / ERRORS_FILENAME
    if errors:
        with open(errors_path, "w", encoding="utf-8") as handle:
            for record in errors:
                handle.write(json.dumps(record.as_dict(), sort_keys=True) + "\n")
    elif errors_path.exists():
        errors_path.unlink()

    return ScrapeResult(
        manifest=manifest,
        manifest_path=manifest_path,
        errors=errors,
        n_downloaded=len(assets) - n_resumed,
        n_resumed=n_resumed,
    )
