#!/usr/bin/env python3
"""End-to-end demo without any external network: serve the bundled fixture
site over local HTTP, scrape it, then preprocess into a labeled dataset.

Useful as a smoke test of the ingestion/preprocess stack and as a template
for pointing the scraper at a real family-index site.
"""

from __future__ import annotations

import argparse
import http.server
import sys
import threading
from pathlib import Path

from welfare_vision.config import poverty_policy_from_name
from welfare_vision.ingestion import ScrapeConfig, run_scrape
from welfare_vision.preprocess import run_preprocess
from welfare_vision.synthetic import make_fixture_mirror


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="working directory for site + data")
    parser.add_argument("--families", type=int, default=8)
    parser.add_argument("--policy", choices=("uniform", "by-group"), default="uniform")
    parser.add_argument("--tile-px", type=int, default=64)
    args = parser.parse_args(argv)

    out = Path(args.out)
    mirror = make_fixture_mirror(out / "site", n_families=args.families)

    class QuietHandler(http.server.SimpleHTTPRequestHandler):
        def __init__(self, *a, **kw):
            super().__init__(*a, directory=str(mirror.root), **kw)

        def log_message(self, *a):
            pass

    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), QuietHandler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    base_url = f"http://127.0.0.1:{server.server_port}/"
    print(f"serving {mirror.root} at {base_url} ({mirror.n_assets} assets)")

    try:
        result = run_scrape(ScrapeConfig(base_url=base_url, output_root=out / "data" / "raw"))
        print(
            f"scraped {len(result.manifest.households)} families: "
            f"{result.n_downloaded} downloaded, {result.n_resumed} resumed, "
            f"{len(result.errors)} errors"
        )
        print(f"manifest -> {result.manifest_path}")

        summary = run_preprocess(
            result.manifest_path,
            poverty_policy_from_name(args.policy),
            out / "data" / "processed",
            tile_px=args.tile_px,
        )
        print(
            f"kept {summary.n_kept}/{summary.n_input} households "
            f"({summary.n_dropped_outliers} over the outlier cap); "
            f"{summary.n_poor} poor / {summary.n_nonpoor} non-poor"
        )
        print(f"category counts (canonical order + merged): {summary.counts_in_canonical_order()}")
        print(f"labeled dataset -> {summary.labeled_path}")
        print(f"mosaics -> {summary.mosaics_dir}")
    finally:
        server.shutdown()
        server.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
