"""Figure and table emission: fixed geometry, determinism, and row order."""

import csv

import pytest
from PIL import Image

from welfare_vision.metrics import (
    ConfusionMatrix,
    MetricsReport,
    RegressionPairs,
    UndefinedMetricError,
    classification_summary,
    r_squared,
    rmse,
)
from welfare_vision.reporting import (
    ReportingError,
    render_category_table,
    render_confusion,
    render_scatter,
)


def _regression_report(preds, targets) -> MetricsReport:
    pairs = RegressionPairs(predictions=preds, targets=targets)
    return MetricsReport(
        task="regression",
        n_valid=len(preds),
        metrics={"rmse": rmse(pairs), "r2": r_squared(pairs)},
        pairs=pairs,
    )


@pytest.fixture
def sample_report() -> MetricsReport:
    targets = [2.0, 3.5, 4.0, 5.25, 6.0, 7.5]
    preds = [2.2, 3.1, 4.4, 5.0, 6.3, 7.2]
    return _regression_report(preds, targets)


class TestScatter:
    def test_fixed_pixel_geometry(self, sample_report, tmp_path):
        out = render_scatter(sample_report, tmp_path / "scatter.png")
        with Image.open(out) as img:
            assert img.size == (1000, 1000)

    def test_byte_deterministic(self, sample_report, tmp_path):
        first = render_scatter(sample_report, tmp_path / "a.png", run_id="r", config_hash="c")
        second = render_scatter(sample_report, tmp_path / "b.png", run_id="r", config_hash="c")
        assert first.read_bytes() == second.read_bytes()

    def test_metadata_embeds_run_identity(self, sample_report, tmp_path):
        out = render_scatter(
            sample_report, tmp_path / "s.png", run_id="run-77", config_hash="deadbeef"
        )
        with Image.open(out) as img:
            assert img.text["run_id"] == "run-77"
            assert img.text["config_hash"] == "deadbeef"

    def test_identity_pairs_render(self, tmp_path):
        report = _regression_report([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert render_scatter(report, tmp_path / "diag.png").exists()

    def test_missing_pairs_rejected(self, tmp_path):
        report = MetricsReport(
            task="regression", n_valid=3, metrics={"rmse": 0.5, "r2": 0.7}, pairs=None
        )
        with pytest.raises(ReportingError):
            render_scatter(report, tmp_path / "x.png")

    def test_classification_report_rejected(self, tmp_path):
        cm = ConfusionMatrix(tn=3, fp=1, fn=1, tp=3)
        report = MetricsReport(
            task="classification", n_valid=8, metrics=classification_summary(cm), confusion=cm
        )
        with pytest.raises(ReportingError):
            render_scatter(report, tmp_path / "x.png")


class TestConfusionHeatmap:
    CM = ConfusionMatrix(tn=71, fp=18, fn=5, tp=79)

    def test_reference_matrix_normalizes_to_known_rates(self):
        rows = self.CM.normalized_rows()
        assert rows[0][0] == pytest.approx(0.80, abs=0.005)
        assert rows[0][1] == pytest.approx(0.20, abs=0.005)
        assert rows[1][0] == pytest.approx(0.06, abs=0.005)
        assert rows[1][1] == pytest.approx(0.94, abs=0.005)

    def test_raw_and_normalized_render_deterministically(self, tmp_path):
        for normalized in (False, True):
            a = render_confusion(self.CM, normalized, tmp_path / f"a{normalized}.png")
            b = render_confusion(self.CM, normalized, tmp_path / f"b{normalized}.png")
            assert a.read_bytes() == b.read_bytes()
            with Image.open(a) as img:
                assert img.size == (1000, 1000)

    def test_raw_differs_from_normalized(self, tmp_path):
        raw = render_confusion(self.CM, False, tmp_path / "raw.png")
        norm = render_confusion(self.CM, True, tmp_path / "norm.png")
        assert raw.read_bytes() != norm.read_bytes()

    def test_zero_row_normalization_rejected(self, tmp_path):
        cm = ConfusionMatrix(tn=0, fp=0, fn=2, tp=2)
        with pytest.raises(UndefinedMetricError):
            render_confusion(cm, True, tmp_path / "x.png")
        # raw rendering of the same matrix is fine
        assert render_confusion(cm, False, tmp_path / "ok.png").exists()


class TestCategoryTable:
    def _reports(self, keys):
        out = {}
        for i, key in enumerate(keys):
            preds = [2.0 + i, 3.0, 4.0 + 0.1 * i]
            targets = [2.5, 3.5, 4.0]
            out[key] = _regression_report(preds, targets)
        return out

    def test_rows_follow_canonical_order_with_merged_last(self, tmp_path):
        keys = ["merged", "stoves", "bathrooms", "roofs"]
        out = render_category_table(self._reports(keys), tmp_path / "table.txt")
        lines = out.read_text().splitlines()
        row_names = [line.split()[0] for line in lines[1:]]
        assert row_names == ["bathrooms", "roofs", "stoves", "merged"]

    def test_csv_sibling_written(self, tmp_path):
        render_category_table(self._reports(["stoves", "merged"]), tmp_path / "table.txt")
        with open(tmp_path / "table.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["input", "n", "rmse", "r2"]
        assert [r[0] for r in rows[1:]] == ["stoves", "merged"]
        assert all(len(r) == 4 for r in rows[1:])

    def test_single_report_single_row(self, tmp_path):
        out = render_category_table(self._reports(["bedrooms"]), tmp_path / "t.txt")
        assert len(out.read_text().splitlines()) == 2

    def test_empty_mapping_rejected(self, tmp_path):
        with pytest.raises(ReportingError):
            render_category_table({}, tmp_path / "t.txt")
