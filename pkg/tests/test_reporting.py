import csv
import io
import json
import math

import pytest
from rich.console import Console

from hybrid_pad.core.analysis.sweep import SweepAnalyzer, SweepRun
from hybrid_pad.core.reporting.report_writer import METRIC_COLUMNS, ReportWriter, finite_or_none
from hybrid_pad.core.validation.report_validator import (
    REPORT_KINDS,
    ReportSchemaError,
    ReportValidator,
    load_schema,
)


def _metrics_report():
    obj = {
        "object_id": "widget",
        "normalization": "set",
        "image_auroc": 0.9,
        "pixel_auroc": 0.95,
        "aupro": 0.7,
        "n_queries": 6,
        "n_defective": 3,
        "n_evaluated": 5,
        "n_localization_failures": 1,
        "localization_failures": ["stain_001"],
    }
    return {
        "report": "metrics",
        "format_version": 1,
        "fpr_limit": 0.3,
        "pixel_auroc_pooling": "pooled",
        "failure_policy": "exclude",
        "objects": [obj],
        "mean": {"image_auroc": 0.9, "pixel_auroc": 0.95, "aupro": 0.7},
    }


def _sweep_report():
    runs = [
        SweepRun(0.5, 0, 6, image_auroc=0.6, pixel_auroc=0.8, aupro=0.4, psnr=20.0, localization_rate=0.5),
        SweepRun(0.5, 1, 6, status="failed: ReconstructionError"),
        SweepRun(1.0, 0, 12, image_auroc=0.9, pixel_auroc=0.9, aupro=0.6, psnr=25.0, localization_rate=1.0),
    ]
    summary = SweepAnalyzer.summarize(runs)
    return {
        "report": "sweep",
        "format_version": 1,
        "object_id": "widget",
        "fractions": [0.5, 1.0],
        "seeds": [0, 1],
        "runs": [run.as_dict() for run in runs],
        "summary": summary,
        "trend": SweepAnalyzer.trend(summary),
    }


# --- validation ---


def test_all_schemas_load():
    for kind in REPORT_KINDS:
        assert load_schema(kind)["type"] == "object"
    with pytest.raises(ValueError):
        load_schema("coverage")


def test_validator_accepts_well_formed_reports():
    validator = ReportValidator()
    assert validator.issues("metrics", _metrics_report()) == []
    assert validator.issues("sweep", _sweep_report()) == []


def test_validator_lists_every_issue():
    report = _metrics_report()
    report["objects"][0]["aupro"] = 1.5
    report["fpr_limit"] = 0.0
    report["extra"] = True
    issues = ReportValidator().issues("metrics", report)
    assert len(issues) == 3
    assert any(issue.startswith("objects/0/aupro:") for issue in issues)
    assert any(issue.startswith("fpr_limit:") for issue in issues)
    assert any(issue.startswith("<root>:") for issue in issues)


def test_validate_raises_schema_error():
    report = _metrics_report()
    del report["mean"]
    with pytest.raises(ReportSchemaError) as excinfo:
        ReportValidator().validate("metrics", report)
    assert excinfo.value.kind == "metrics"
    assert len(excinfo.value.issues) == 1


def test_undefined_metric_is_null():
    report = _metrics_report()
    report["objects"][0]["pixel_auroc"] = None
    assert ReportValidator().issues("metrics", report) == []
    assert finite_or_none(math.nan) is None
    assert finite_or_none(math.inf) is None
    assert finite_or_none(None) is None
    assert finite_or_none(1) == 1.0


# --- writing ---


def test_metrics_report_files(tmp_path):
    writer = ReportWriter(tmp_path / "reports", console=Console(file=io.StringIO()))
    paths = writer.write_report("metrics", _metrics_report())

    assert json.loads(paths["json"].read_text()) == _metrics_report()
    with paths["csv"].open(newline="") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == METRIC_COLUMNS
    assert [row["object_id"] for row in rows] == ["widget", "mean"]
    assert rows[0]["n_localization_failures"] == "1"
    assert rows[1]["n_queries"] == ""
    summary = paths["txt"].read_text()
    assert "stain_001" in summary
    assert "Mean AUPRO: 0.7000" in summary


def test_invalid_report_is_not_written(tmp_path):
    writer = ReportWriter(tmp_path, console=Console(file=io.StringIO()))
    report = _metrics_report()
    report["failure_policy"] = "ignore"
    with pytest.raises(ReportSchemaError):
        writer.write_report("metrics", report)
    assert list(tmp_path.iterdir()) == []


def test_sweep_report_writes_run_table(tmp_path):
    writer = ReportWriter(tmp_path, console=Console(file=io.StringIO()))
    paths = writer.write_report("sweep", _sweep_report(), name="sweep_widget")
    assert paths["csv_runs"].name == "sweep_widget_runs.csv"
    with paths["csv_runs"].open(newline="") as f:
        runs = list(csv.DictReader(f))
    assert [run["status"] for run in runs] == ["ok", "failed: ReconstructionError", "ok"]
    assert runs[1]["image_auroc"] == ""
    assert "FAILED RUNS" in paths["txt"].read_text()


def test_print_report_to_console(tmp_path):
    buffer = io.StringIO()
    writer = ReportWriter(tmp_path, console=Console(file=buffer, width=160))
    writer.print_report("metrics", _metrics_report())
    text = buffer.getvalue()
    assert "widget" in text
    assert "Localization failure policy: exclude" in text


# --- sweep analysis ---


def test_sweep_summary_uses_successful_runs():
    summary = _sweep_report()["summary"]
    assert [row["fraction"] for row in summary] == [0.5, 1.0]
    assert summary[0]["n_runs"] == 1
    assert summary[0]["median_image_auroc"] == pytest.approx(0.6)
    assert summary[0]["delta_image_auroc"] == pytest.approx(-0.3)
    assert summary[1]["delta_image_auroc"] == 0.0


def test_sweep_trend():
    trend = _sweep_report()["trend"]
    assert trend["holds"] is True
    assert (trend["low_fraction"], trend["high_fraction"]) == (0.5, 1.0)

    runs = [SweepRun(0.2, 0, 2, image_auroc=0.8), SweepRun(1.0, 0, 10, image_auroc=0.7)]
    assert SweepAnalyzer.trend(SweepAnalyzer.summarize(runs))["holds"] is False
    failed = [SweepRun(0.2, 0, 2, status="failed"), SweepRun(1.0, 0, 10, image_auroc=0.7)]
    assert SweepAnalyzer.trend(SweepAnalyzer.summarize(failed))["holds"] is None
    assert SweepAnalyzer.trend([])["holds"] is None
