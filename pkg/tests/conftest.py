"""Shared fixtures: a local HTTP server over synthetic mirror sites, with
request logging and fault injection, plus a small end-to-end pipeline."""

from __future__ import annotations

import functools
import http.server
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from welfare_vision.config import PipelineConfig
from welfare_vision.ingestion import ScrapeConfig, run_scrape
from welfare_vision.preprocess import PovertyPolicy, run_preprocess
from welfare_vision.synthetic import FixtureMirror, make_fixture_mirror

# one line per acceptance criterion, echoed after the test summary so the
# verdicts survive pytest's output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@dataclass
class SiteServer:
    """Serves a directory; records request times and can inject failures.

    ``fail`` maps URL paths (e.g. ``/assets/x.jpg``) to a behavior:
    ``"404"``, ``"garbage"`` (200 with non-image bytes), or ``"500_once"``
    (one 500, then normal service).
    """

    root: Path
    server: http.server.ThreadingHTTPServer = None
    request_log: list = field(default_factory=list)
    fail: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.server.server_port}/"

    def requests_for(self, suffix: str) -> list[float]:
        with self._lock:
            return [t for t, path in self.request_log if path.endswith(suffix)]

    def asset_request_count(self) -> int:
        with self._lock:
            return sum(1 for _, path in self.request_log if path.endswith(".jpg"))

    def clear_log(self) -> None:
        with self._lock:
            self.request_log.clear()


def _make_handler(site: SiteServer):
    class Handler(http.server.SimpleHTTPRequestHandler):
        def __init__(self, *args, **kwargs):
            super().__init__(*args, directory=str(site.root), **kwargs)

        def log_message(self, *args):  # keep test output quiet
            pass

        def do_GET(self):
            with site._lock:
                site.request_log.append((time.monotonic(), self.path))
                behavior = site.fail.get(self.path)
                if behavior == "500_once":
                    del site.fail[self.path]
            if behavior == "404":
                self.send_error(404, "injected")
                return
            if behavior == "garbage":
                body = b"this is not an image"
                self.send_response(200)
                self.send_header("Content-Type", "image/jpeg")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
                return
            if behavior == "500_once":
                self.send_error(500, "injected transient")
                return
            super().do_GET()

    return Handler


@pytest.fixture
def serve_site(tmp_path):
    """Factory: write a fixture mirror and serve it over local HTTP."""
    servers = []

    def _serve(n_families: int = 4, corrupt_asset: bool = False,
               subdir: str = "site") -> tuple[FixtureMirror, SiteServer]:
        mirror = make_fixture_mirror(tmp_path / subdir, n_families=n_families,
                                     corrupt_asset=corrupt_asset)
        site = SiteServer(root=mirror.root)
        site.server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _make_handler(site))
        threading.Thread(target=site.server.serve_forever, daemon=True).start()
        servers.append(site)
        return mirror, site

    yield _serve
    for site in servers:
        site.server.shutdown()
        site.server.server_close()


@dataclass
class MiniPipeline:
    """A scraped + preprocessed fixture dataset shared across tests."""

    config: PipelineConfig
    mirror: FixtureMirror
    manifest_path: Path
    labeled_path: Path


@pytest.fixture(scope="session")
def mini_pipeline(tmp_path_factory) -> MiniPipeline:
    root = tmp_path_factory.mktemp("mini")
    mirror = make_fixture_mirror(root / "site", n_families=8)
    site = SiteServer(root=mirror.root)
    site.server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _make_handler(site))
    threading.Thread(target=site.server.serve_forever, daemon=True).start()
    try:
        config = PipelineConfig(
            data_root=str(root / "data"),
            base_url=site.base_url,
            backbone_id="smallnet",
            epochs=2,
            batch_size=8,
            input_px=48,
            tile_px=32,
            seed=9,
        )
        result = run_scrape(ScrapeConfig(base_url=site.base_url, output_root=config.raw_dir))
        assert not result.errors
        summary = run_preprocess(
            result.manifest_path,
            PovertyPolicy.uniform(),
            config.processed_dir,
            seed=config.seed,
            tile_px=config.tile_px,
        )
        return MiniPipeline(
            config=config,
            mirror=mirror,
            manifest_path=result.manifest_path,
            labeled_path=summary.labeled_path,
        )
    finally:
        site.server.shutdown()
        site.server.server_close()
