"""Report files: JSON round trip, delimited table, rendered figures."""

import json

import pytest

from motiondesk.metrics import MetricReport, MetricValue, aggregate_runs
from motiondesk.report import ReportError, load_report, report_to_csv, write_report


@pytest.fixture
def report() -> MetricReport:
    per_run = [
        {"fid": 1.25, "mpjpe_mm": 84.0, "r_at_1": 0.41},
        {"fid": 1.75, "mpjpe_mm": 86.0, "r_at_1": 0.39},
        {"fid": 1.50, "mpjpe_mm": 85.0, "r_at_1": 0.40},
    ]
    return aggregate_runs(per_run)


class TestJson:
    def test_document_holds_exact_metric_payload(self, report, tmp_path):
        paths = write_report(report, tmp_path)
        doc = json.loads(paths["json"].read_text())
        assert doc["format_version"] == 1
        assert doc["metrics"] == report.to_json()

    def test_round_trip_restores_values_and_runs(self, report, tmp_path):
        paths = write_report(report, tmp_path)
        back = load_report(paths["json"])
        assert back.runs == report.runs
        assert back.to_json() == report.to_json()

    def test_deterministic_bytes_for_identical_input(self, report, tmp_path):
        a = write_report(report, tmp_path / "a")
        b = write_report(report, tmp_path / "b")
        assert a["json"].read_bytes() == b["json"].read_bytes()
        assert a["csv"].read_bytes() == b["csv"].read_bytes()

    def test_unknown_format_version_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"format_version": 99, "metrics": {}}))
        with pytest.raises(ReportError):
            load_report(path)


class TestCsv:
    def test_header_and_one_row_per_metric(self, report):
        lines = report_to_csv(report).splitlines()
        assert lines[0] == "metric,value,ci95,runs"
        assert len(lines) == 1 + len(report.metrics)
        names = [line.split(",")[0] for line in lines[1:]]
        assert names == list(report.metrics)

    def test_values_survive_float_round_trip(self, report):
        lines = report_to_csv(report).splitlines()[1:]
        for line in lines:
            name, value, ci, runs = line.split(",")
            assert float(value) == report.metrics[name].value
            assert float(ci) == report.metrics[name].ci95
            assert int(runs) == report.runs

    def test_single_run_ci_field_is_blank(self):
        single = MetricReport(metrics={"fid": MetricValue(value=2.0, ci95=None)}, runs=1)
        lines = report_to_csv(single).splitlines()
        assert lines[1] == "fid,2.0,,1"


class TestFigures:
    def test_values_figure_is_written_png(self, report, tmp_path):
        paths = write_report(report, tmp_path)
        data = paths["figure"].read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        assert len(data) > 1000

    def test_runs_figure_written_only_with_per_run_values(self, report, tmp_path):
        per_run = [
            {"fid": 1.25, "mpjpe_mm": 84.0, "r_at_1": 0.41},
            {"fid": 1.75, "mpjpe_mm": 86.0, "r_at_1": 0.39},
            {"fid": 1.50, "mpjpe_mm": 85.0, "r_at_1": 0.40},
        ]
        without = write_report(report, tmp_path / "a")
        assert "runs_figure" not in without
        with_runs = write_report(report, tmp_path / "b", per_run=per_run)
        data = with_runs["runs_figure"].read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"

    def test_artifacts_sit_alongside_each_other(self, report, tmp_path):
        paths = write_report(report, tmp_path / "out", stem="eval")
        assert {p.parent for p in paths.values()} == {tmp_path / "out"}
        assert {p.name for p in paths.values()} == {"eval.json", "eval.csv", "eval.png"}


class TestValidation:
    def test_empty_report_rejected(self, tmp_path):
        with pytest.raises(ReportError):
            write_report(MetricReport(), tmp_path)

    def test_per_run_row_count_must_match_runs(self, report, tmp_path):
        with pytest.raises(ReportError):
            write_report(report, tmp_path, per_run=[{"fid": 1.0}])

    def test_per_run_names_must_match_report(self, report, tmp_path):
        rows = [{"fid": 1.0}, {"fid": 2.0}, {"fid": 3.0}]
        with pytest.raises(ReportError):
            write_report(report, tmp_path, per_run=rows)
