"""Pipeline-wide configuration: one flat dataclass, YAML loading, env-var
data-root fallback, and a canonical content hash used for run identity."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .manifest import CATEGORIES
from .preprocess import PovertyPolicy

DATA_ROOT_ENV = "WEALTH_DATA_ROOT"
DEFAULT_DATA_DIRNAME = "wealth-data"

POLICY_NAMES = ("uniform", "by-group")


class ConfigError(ValueError):
    pass


def resolve_data_root(explicit: Path | str | None = None) -> Path:
    """Precedence: explicit argument, then $WEALTH_DATA_ROOT, then ./wealth-data."""
    if explicit is not None:
        return Path(explicit)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    return Path.cwd() / DEFAULT_DATA_DIRNAME


def poverty_policy_from_name(name: str, daily_line_usd: float = 1.9) -> PovertyPolicy:
    if name == "uniform":
        return PovertyPolicy.uniform(daily_line_usd)
    if name == "by-group":
        return PovertyPolicy.by_income_group()
    raise ConfigError(f"policy must be one of {POLICY_NAMES}, got {name!r}")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a full scrape -> preprocess -> train -> report run needs."""

    data_root: str = ""
    base_url: str = ""
    categories: tuple[str, ...] = CATEGORIES
    policy: str = "uniform"
    daily_line_usd: float = 1.9
    cap_usd: float = 5000.0
    seed: int = 42
    tile_px: int = 224
    input_px: int = 224
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    backbone_id: str = "resnet18"
    beta: float = 0.8
    max_concurrent: int = 4
    min_request_interval_ms: int = 0

    def __post_init__(self) -> None:
        if self.policy not in POLICY_NAMES:
            raise ConfigError(f"policy must be one of {POLICY_NAMES}, got {self.policy!r}")
        for name in ("daily_line_usd", "cap_usd", "learning_rate", "beta"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be a positive number, got {value!r}")
        for name in ("tile_px", "input_px", "epochs", "batch_size", "max_concurrent"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.min_request_interval_ms < 0:
            raise ConfigError("min_request_interval_ms must be >= 0")
        if not self.data_root:
            object.__setattr__(self, "data_root", str(resolve_data_root()))
        object.__setattr__(self, "categories", tuple(self.categories))

    @property
    def root(self) -> Path:
        return Path(self.data_root)

    @property
    def raw_dir(self) -> Path:
        return self.root / "raw"

    @property
    def processed_dir(self) -> Path:
        return self.root / "processed"

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs"

    def poverty_policy(self) -> PovertyPolicy:
        return poverty_policy_from_name(self.policy, self.daily_line_usd)

    def as_dict(self) -> dict:
        data = asdict(self)
        data["categories"] = list(self.categories)
        return data

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, **overrides) -> "PipelineConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cleaned = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **cleaned)


def load_config(path: Path | str | None = None, **overrides) -> PipelineConfig:
    """Build config from an optional YAML file plus keyword overrides."""
    values: dict = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        values.update(raw)
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {sorted(unknown)}")
    if "categories" in values:
        values["categories"] = tuple(values["categories"])
    try:
        config = PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return config.with_overrides(**overrides)
