"""Append-only run registry: JSON-lines with a rolling hash chain.

Every append links to the previous line's chain hash, so any in-place edit
of history is detectable on read. Appends are serialized across processes
with a sidecar file lock.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from filelock import FileLock

REGISTRY_FILENAME = "registry.jsonl"
STATUSES = ("pending", "running", "done", "failed")
_GENESIS = "0" * 64


class RegistryError(ValueError):
    pass


class RegistryIntegrityError(RegistryError):
    pass


class UnknownRunError(KeyError):
    pass


@dataclass
class RunRegistryEntry:
    run_id: str
    recipe: str
    config_hash: str
    status: str
    artifacts: list[str] = field(default_factory=list)
    stage_timings_s: dict[str, float] = field(default_factory=dict)
    error: str | None = None
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise RegistryError(f"status must be one of {STATUSES}, got {self.status!r}")

    def as_dict(self) -> dict:
        return asdict(self)


def _chain_hash(previous: str, entry_json: str) -> str:
    return hashlib.sha256((previous + entry_json).encode("utf-8")).hexdigest()


class RunRegistry:
    """Registry facade over one JSONL file; reads verify the whole chain."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self._lock = FileLock(str(self.path) + ".lock")

    def append(self, entry: RunRegistryEntry) -> None:
        with self._lock:
            rows = self._read_verified()
            previous = rows[-1][1] if rows else _GENESIS
            entry_json = json.dumps(entry.as_dict(), sort_keys=True, separators=(",", ":"))
            line = json.dumps(
                {"entry": json.loads(entry_json), "chain": _chain_hash(previous, entry_json)},
                sort_keys=True,
                separators=(",", ":"),
            )
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write(line + "\n")

    def _read_verified(self) -> list[tuple[RunRegistryEntry, str]]:
        if not self.path.exists():
            return []
        rows: list[tuple[RunRegistryEntry, str]] = []
        previous = _GENESIS
        with open(self.path, encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    entry_dict, chain = record["entry"], record["chain"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise RegistryIntegrityError(f"{self.path}:{lineno}: unreadable row") from exc
                entry_json = json.dumps(entry_dict, sort_keys=True, separators=(",", ":"))
                expected = _chain_hash(previous, entry_json)
                if chain != expected:
                    raise RegistryIntegrityError(
                        f"{self.path}:{lineno}: hash chain broken (registry modified?)"
                    )
                rows.append((RunRegistryEntry(**entry_dict), chain))
                previous = chain
        return rows

    def history(self) -> list[RunRegistryEntry]:
        return [entry for entry, _ in self._read_verified()]

    def list_runs(self) -> list[RunRegistryEntry]:
        """Latest entry per run_id, in first-seen order."""
        latest: dict[str, RunRegistryEntry] = {}
        for entry in self.history():
            latest[entry.run_id] = entry
        return list(latest.values())

    def show_run(self, run_id: str) -> RunRegistryEntry:
        for entry in reversed(self.history()):
            if entry.run_id == run_id:
                return entry
        raise UnknownRunError(run_id)
