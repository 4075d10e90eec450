import time
from contextlib import contextmanager
from typing import Dict, Iterator, Sequence

import numpy as np

STAGE_FIELDS = ("localization_ms", "nvs_ms", "scoring_ms", "total_ms")


class StageTimer:
    """Accumulates monotonic wall-clock milliseconds per named stage."""

    def __init__(self) -> None:
        self.elapsed_ms: Dict[str, float] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter_ns()
        try:
            yield
        finally:
            ms = (time.perf_counter_ns() - start) / 1e6
            self.elapsed_ms[name] = self.elapsed_ms.get(name, 0.0) + ms

    def milliseconds(self, name: str) -> float:
        return self.elapsed_ms.get(name, 0.0)

    def seconds(self, name: str) -> float:
        return self.milliseconds(name) / 1000.0


def timing_statistics(samples: Sequence[Dict[str, float]]) -> Dict[str, Dict[str, float]]:
    """Mean, median and 95th percentile (linear interpolation) of every stage over all samples."""
    stats = {}
    for name in STAGE_FIELDS:
        values = np.array([sample[name] for sample in samples], dtype=np.float64)
        if values.size == 0:
            stats[name] = {"mean_ms": 0.0, "median_ms": 0.0, "p95_ms": 0.0}
            continue
        stats[name] = {
            "mean_ms": float(values.mean()),
            "median_ms": float(np.median(values)),
            "p95_ms": float(np.percentile(values, 95)),
        }
    return stats
