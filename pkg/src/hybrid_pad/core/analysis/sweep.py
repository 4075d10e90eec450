"""Aggregation of sparse-view runs: medians per fraction and the low-vs-high trend check."""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)
TREND_METRIC = "image_auroc"


@dataclass
class SweepRun:
    fraction: float
    seed: int
    n_references: int
    status: str = "ok"
    image_auroc: Optional[float] = None
    pixel_auroc: Optional[float] = None
    aupro: Optional[float] = None
    psnr: Optional[float] = None
    localization_rate: Optional[float] = None

    def as_dict(self) -> Dict:
        return asdict(self)


def _median(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.median(present)) if present else None


class SweepAnalyzer:
    """Summarizes runs per fraction and differences each fraction against the densest one."""

    METRICS = ("image_auroc", "pixel_auroc", "aupro", "psnr", "localization_rate")

    @staticmethod
    def summarize(runs: Sequence[SweepRun]) -> List[Dict]:
        fractions = sorted({run.fraction for run in runs})
        summary = []
        for fraction in fractions:
            group = [run for run in runs if run.fraction == fraction and run.status == "ok"]
            row = {"fraction": fraction, "n_runs": len(group)}
            for metric in SweepAnalyzer.METRICS:
                row[f"median_{metric}"] = _median([getattr(run, metric) for run in group])
            summary.append(row)
        return SweepAnalyzer.difference_to_densest(summary)

    @staticmethod
    def difference_to_densest(summary: List[Dict], metric: str = TREND_METRIC) -> List[Dict]:
        """Adds `delta_<metric>` = median at this fraction minus median at the largest fraction."""
        if not summary:
            return summary
        base = summary[-1][f"median_{metric}"]
        for row in summary:
            value = row[f"median_{metric}"]
            row[f"delta_{metric}"] = None if value is None or base is None else value - base
        return summary

    @staticmethod
    def trend(summary: List[Dict], metric: str = TREND_METRIC) -> Dict:
        """Median at the largest fraction must not fall below the median at the smallest."""
        if not summary:
            return {
                "metric": metric,
                "low_fraction": 0.0,
                "high_fraction": 0.0,
                "low_median": None,
                "high_median": None,
                "holds": None,
            }
        low, high = summary[0], summary[-1]
        low_median, high_median = low[f"median_{metric}"], high[f"median_{metric}"]
        holds = None if low_median is None or high_median is None else bool(high_median >= low_median)
        if holds is False:
            logger.warning(
                f"Median {metric} at fraction {high['fraction']} ({high_median:.4f}) is below "
                f"fraction {low['fraction']} ({low_median:.4f})"
            )
        return {
            "metric": metric,
            "low_fraction": low["fraction"],
            "high_fraction": high["fraction"],
            "low_median": low_median,
            "high_median": high_median,
            "holds": holds,
        }
