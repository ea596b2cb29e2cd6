"""Manifest construction, content addressing, and on-disk integrity."""

import json
from pathlib import Path

import pytest

from welfare_vision.manifest import (
    CATEGORIES,
    DatasetManifest,
    HouseholdMeta,
    ManifestIntegrityError,
    OrphanAssetError,
    RawImageAsset,
    build_manifest,
    read_manifest,
    verify_output_tree,
    write_manifest,
)


def _meta(family_id="fam-1", country="Burundi", consumption=120.0):
    return HouseholdMeta(
        family_id=family_id, country=country, monthly_consumption_usd=consumption
    )


def _asset(family_id="fam-1", category="stoves", path="images/a.jpg", digest="ab" * 32):
    return RawImageAsset(
        family_id=family_id,
        category=category,
        remote_url=f"http://example.test/{family_id}/{category}.jpg",
        local_path=Path(path),
        content_hash=digest,
        byte_size=123,
    )


class TestBuildManifest:
    def test_every_household_lists_every_category(self):
        manifest = build_manifest([_asset()], [_meta()])
        entry = manifest.households[0]
        assert set(entry.assets) == set(CATEGORIES)
        assert entry.assets["stoves"] is not None
        absent = [c for c in CATEGORIES if entry.assets[c] is None]
        assert len(absent) == 6

    def test_households_sorted_by_family_id(self):
        metas = [_meta("fam-b"), _meta("fam-a")]
        assets = [_asset("fam-b"), _asset("fam-a", path="images/b.jpg")]
        manifest = build_manifest(assets, metas)
        assert [e.family_id for e in manifest.households] == ["fam-a", "fam-b"]

    def test_orphan_asset_rejected(self):
        with pytest.raises(OrphanAssetError):
            build_manifest([_asset("ghost")], [_meta("fam-1")])

    def test_duplicate_meta_rejected(self):
        with pytest.raises(ValueError):
            build_manifest([], [_meta(), _meta()])

    def test_paths_relativized_to_root(self, tmp_path):
        asset = _asset(path=tmp_path / "images" / "a.jpg")
        manifest = build_manifest([asset], [_meta()], root=tmp_path)
        ref = manifest.households[0].assets["stoves"]
        assert ref.path == "images/a.jpg"

    def test_shared_blob_has_one_hash_two_refs(self):
        # the same photo posted under two categories: one stored blob,
        # both manifest rows keep their own reference to it
        digest = "cd" * 32
        assets = [
            _asset(category="stoves", path="images/a.jpg", digest=digest),
            _asset(category="roofs", path="images/a.jpg", digest=digest),
        ]
        manifest = build_manifest(assets, [_meta()])
        blobs = manifest.unique_blobs()
        assert len(blobs[digest]) == 2
        assert {cat for _, cat in blobs[digest]} == {"stoves", "roofs"}
        entry = manifest.households[0]
        assert entry.assets["stoves"].path == entry.assets["roofs"].path


class TestManifestHash:
    def test_hash_independent_of_input_order(self):
        metas = [_meta("fam-a"), _meta("fam-b")]
        assets = [_asset("fam-a"), _asset("fam-b", path="images/b.jpg")]
        first = build_manifest(assets, metas)
        second = build_manifest(list(reversed(assets)), list(reversed(metas)))
        assert first.manifest_hash == second.manifest_hash

    def test_hash_changes_with_content(self):
        base = build_manifest([_asset()], [_meta()])
        changed = build_manifest([_asset(digest="ef" * 32)], [_meta()])
        assert base.manifest_hash != changed.manifest_hash


class TestRoundTrip:
    def test_write_read_preserves_everything(self, tmp_path):
        manifest = build_manifest(
            [_asset(), _asset(category="roofs", path="images/b.jpg", digest="ee" * 32)],
            [_meta()],
        )
        path = tmp_path / "manifest.jsonl"
        write_manifest(manifest, path)
        loaded = read_manifest(path)
        assert loaded.manifest_hash == manifest.manifest_hash
        assert loaded.households == manifest.households

    def test_rewrite_same_content_leaves_bytes_untouched(self, tmp_path):
        manifest = build_manifest([_asset()], [_meta()])
        path = tmp_path / "manifest.jsonl"
        write_manifest(manifest, path)
        before = path.read_bytes()
        write_manifest(manifest, path)  # created_at would differ if rewritten
        assert path.read_bytes() == before

    def test_header_carries_schema_and_hash(self, tmp_path):
        manifest = build_manifest([_asset()], [_meta()])
        path = tmp_path / "manifest.jsonl"
        write_manifest(manifest, path)
        header = json.loads(path.read_text().splitlines()[0])
        assert header["schema_version"] == 1
        assert header["manifest_hash"] == manifest.manifest_hash

    def test_tampered_row_detected(self, tmp_path):
        manifest = build_manifest([_asset()], [_meta()])
        path = tmp_path / "manifest.jsonl"
        write_manifest(manifest, path)
        lines = path.read_text().splitlines()
        lines[1] = lines[1].replace("120.0", "999.0")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestIntegrityError):
            read_manifest(path)


class TestVerifyOutputTree:
    def test_quarantine_and_referenced_files_pass(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "images" / "a.jpg").write_bytes(b"x")
        (tmp_path / "quarantine").mkdir()
        (tmp_path / "quarantine" / "bad.jpg").write_bytes(b"y")
        manifest = build_manifest([_asset(path="images/a.jpg")], [_meta()])
        assert verify_output_tree(manifest, tmp_path) == []

    def test_unreferenced_image_reported(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "images" / "a.jpg").write_bytes(b"x")
        (tmp_path / "images" / "stray.jpg").write_bytes(b"z")
        manifest = build_manifest([_asset(path="images/a.jpg")], [_meta()])
        stray = verify_output_tree(manifest, tmp_path)
        assert [p.name for p in stray] == ["stray.jpg"]


class TestValidation:
    def test_meta_requires_positive_consumption(self):
        with pytest.raises(ValueError):
            HouseholdMeta(family_id="f", country="Burundi", monthly_consumption_usd=0.0)

    def test_meta_requires_safe_family_id(self):
        with pytest.raises(ValueError):
            HouseholdMeta(family_id="bad id", country="Burundi", monthly_consumption_usd=1.0)

    def test_empty_manifest_allowed_for_bootstrap(self):
        manifest = DatasetManifest(households=())
        assert manifest.manifest_hash
