import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from rich.console import Console
from rich.table import Table

from hybrid_pad.core.validation.report_validator import ReportValidator

logger = logging.getLogger(__name__)

Rows = List[Dict[str, Any]]

METRIC_COLUMNS = [
    "object_id",
    "image_auroc",
    "pixel_auroc",
    "aupro",
    "n_queries",
    "n_defective",
    "n_evaluated",
    "n_localization_failures",
]
BENCH_COLUMNS = ["stage", "mean_ms", "median_ms", "p95_ms", "reference_ms"]
SWEEP_COLUMNS = [
    "fraction",
    "n_runs",
    "median_image_auroc",
    "median_pixel_auroc",
    "median_aupro",
    "median_psnr",
    "median_localization_rate",
    "delta_image_auroc",
]
SWEEP_RUN_COLUMNS = [
    "fraction",
    "seed",
    "n_references",
    "status",
    "image_auroc",
    "pixel_auroc",
    "aupro",
    "psnr",
    "localization_rate",
]
INFERENCE_COLUMNS = ["image_id", "defect", "localization_ok", "reason", "image_score", "n_matches", "n_inliers"]
TIMING_COLUMNS = ["image_id", "localization_ms", "nvs_ms", "scoring_ms", "total_ms"]


def finite_or_none(value: Optional[float]) -> Optional[float]:
    """JSON has no NaN or infinity; undefined values are written as null."""
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


class ReportWriter:
    """Handles generation and writing of pipeline reports."""

    def __init__(self, output_dir: Path, console: Optional[Console] = None):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.validator = ReportValidator()
        self.console = console or Console()

    def write_report(self, kind: str, report: Dict[str, Any], name: Optional[str] = None) -> Dict[str, Path]:
        """Validate, then write `<name>.json` plus the CSV mirror(s) and text summary for this kind."""
        self.validator.validate(kind, report)
        name = name or kind
        paths = {"json": self.output_dir / f"{name}.json"}
        paths["json"].write_text(json.dumps(report, indent=2, allow_nan=False) + "\n")

        builder = _BUILDERS[kind]
        for suffix, (columns, rows) in builder.tables(report).items():
            csv_path = self.output_dir / f"{name}{suffix}.csv"
            self.write_csv(csv_path, columns, rows)
            paths[f"csv{suffix}"] = csv_path
        if builder.summary is not None:
            paths["txt"] = self.output_dir / f"{name}.txt"
            paths["txt"].write_text("\n".join(builder.summary(report)) + "\n")
        logger.info(f"Report written to: {paths['json']}")
        return paths

    @staticmethod
    def write_csv(path: Path, columns: Sequence[str], rows: Rows) -> None:
        with path.open("w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: "" if row.get(k) is None else row.get(k) for k in columns})

    def print_table(self, title: str, columns: Sequence[str], rows: Rows) -> None:
        table = Table(title=title)
        for column in columns:
            table.add_column(column, justify="left" if column in ("object_id", "stage", "status") else "right")
        for row in rows:
            table.add_row(*(_cell(row.get(column)) for column in columns))
        self.console.print(table)

    def print_report(self, kind: str, report: Dict[str, Any]) -> None:
        builder = _BUILDERS[kind]
        for suffix, (columns, rows) in builder.tables(report).items():
            if suffix == "":
                self.print_table(builder.title, columns, rows)
        if builder.summary is not None:
            for line in builder.summary(report)[-builder.console_lines :]:
                self.console.print(line)


def _metrics_tables(report: Dict[str, Any]) -> Dict[str, Tuple[List[str], Rows]]:
    rows = [dict(obj) for obj in report["objects"]]
    rows.append({"object_id": "mean", **report["mean"]})
    return {"": (METRIC_COLUMNS, rows)}


def _metrics_summary(report: Dict[str, Any]) -> List[str]:
    lines = ["=== Anomaly Detection Metrics ===", ""]
    for obj in report["objects"]:
        lines.append(obj["object_id"])
        for key in ("image_auroc", "pixel_auroc", "aupro"):
            lines.append(f"  {key}: {_cell(obj[key])}")
        lines.append(f"  evaluated {obj['n_evaluated']} of {obj['n_queries']} queries ({obj['n_defective']} defective)")
        if obj["localization_failures"]:
            lines.append(f"  Localization failures ({obj['n_localization_failures']}):")
            lines.extend(f"  └─ {image_id}" for image_id in obj["localization_failures"])
        lines.append("")
    lines += [
        "[*] SUMMARY",
        "-" * 11,
        f"Objects: {len(report['objects'])}",
        f"Mean image AUROC: {_cell(report['mean']['image_auroc'])}",
        f"Mean pixel AUROC: {_cell(report['mean']['pixel_auroc'])}",
        f"Mean AUPRO: {_cell(report['mean']['aupro'])}",
        f"AUPRO FPR limit: {report['fpr_limit']}",
        f"Pixel AUROC pooling: {report['pixel_auroc_pooling']} over all evaluated images",
        f"Localization failure policy: {report['failure_policy']}",
    ]
    return lines


def _bench_tables(report: Dict[str, Any]) -> Dict[str, Tuple[List[str], Rows]]:
    rows = []
    for stage, stats in report["stages"].items():
        rows.append({"stage": stage, **stats, "reference_ms": report["reference_ms"][stage]})
    return {"": (BENCH_COLUMNS, rows)}


def _bench_summary(report: Dict[str, Any]) -> List[str]:
    ref = report["reference_ms"]
    stages = report["stages"]
    return [
        "=== Inference Timing ===",
        "",
        f"Object: {report['object_id']}",
        f"Queries: {report['n_queries']} ({report['n_localized']} localized), {report['repetitions']} repetitions",
        "",
        "[*] SUMMARY",
        "-" * 11,
        f"Hardware: {report['hardware']}",
        "Measured median (ms): "
        f"localization {stages['localization_ms']['median_ms']:.1f} / "
        f"nvs {stages['nvs_ms']['median_ms']:.1f} / "
        f"scoring {stages['scoring_ms']['median_ms']:.1f} / "
        f"total {stages['total_ms']['median_ms']:.1f}",
        f"Published GPU reference (ms): localization {ref['localization_ms']} / nvs {ref['nvs_ms']} / "
        f"scoring {ref['scoring_ms']} / total {ref['total_ms']} ({ref['note']})",
        f"Outputs identical across repetitions: {_cell(report['outputs_identical'])}",
    ]


def _sweep_tables(report: Dict[str, Any]) -> Dict[str, Tuple[List[str], Rows]]:
    return {"": (SWEEP_COLUMNS, report["summary"]), "_runs": (SWEEP_RUN_COLUMNS, report["runs"])}


def _sweep_summary(report: Dict[str, Any]) -> List[str]:
    trend = report["trend"]
    lines = ["=== Sparse-View Sweep ===", "", f"Object: {report['object_id']}", ""]
    failed = [run for run in report["runs"] if run["status"] != "ok"]
    if failed:
        lines.append("[!] FAILED RUNS")
        lines.extend(f"  └─ fraction {run['fraction']} seed {run['seed']}: {run['status']}" for run in failed)
        lines.append("")
    lines += [
        "[*] SUMMARY",
        "-" * 11,
        f"Fractions: {', '.join(str(f) for f in report['fractions'])}",
        f"Seeds: {', '.join(str(s) for s in report['seeds'])}",
        f"Median {trend['metric']} at {trend['high_fraction']}: {_cell(trend['high_median'])}",
        f"Median {trend['metric']} at {trend['low_fraction']}: {_cell(trend['low_median'])}",
        f"Trend holds (high >= low): {_cell(trend['holds'])}",
    ]
    return lines


def _inference_tables(report: Dict[str, Any]) -> Dict[str, Tuple[List[str], Rows]]:
    rows = list(report["queries"])
    rows += [{"image_id": u["image_id"], "reason": u["reason"], "localization_ok": False} for u in report["unreadable"]]
    return {"": (INFERENCE_COLUMNS, rows)}


def _inference_summary(report: Dict[str, Any]) -> List[str]:
    localized = sum(q["localization_ok"] for q in report["queries"])
    return [
        "=== Inference ===",
        "",
        "[*] SUMMARY",
        "-" * 11,
        f"Object: {report['object_id']}",
        f"Queries: {len(report['queries'])}",
        f"Localized: {localized}",
        f"Localization failures: {len(report['queries']) - localized}",
        f"Unreadable: {len(report['unreadable'])}",
        f"Normalization: {report['normalization']}",
    ]


def _timings_tables(report: Dict[str, Any]) -> Dict[str, Tuple[List[str], Rows]]:
    return {"": (TIMING_COLUMNS, report["queries"])}


class _Builder:
    def __init__(
        self,
        title: str,
        tables: Callable[[Dict[str, Any]], Dict[str, Tuple[List[str], Rows]]],
        summary: Optional[Callable[[Dict[str, Any]], List[str]]] = None,
        console_lines: int = 0,
    ):
        self.title = title
        self.tables = tables
        self.summary = summary
        self.console_lines = console_lines


_BUILDERS = {
    "metrics": _Builder("Anomaly detection metrics", _metrics_tables, _metrics_summary, 3),
    "bench": _Builder("Inference timing per stage", _bench_tables, _bench_summary, 3),
    "sweep": _Builder("Sparse-view sweep (medians over seeds)", _sweep_tables, _sweep_summary, 3),
    "inference": _Builder("Inference", _inference_tables, _inference_summary, 0),
    "timings": _Builder("Stage timings", _timings_tables),
}
