"""Anomaly map export: 16-bit grayscale PNG plus a JSON sidecar."""
import json
from pathlib import Path
from typing import Tuple

from hybrid_pad.core.anomaly.scoring import AnomalyMap
from hybrid_pad.core.utils.images import load_map_16bit, save_map_16bit


def export_anomaly_map(
    out_dir: Path, image_id: str, anomaly_map: AnomalyMap, localization_ok: bool = True
) -> Tuple[Path, Path]:
    """Writes `<image_id>.png` (scores clipped to [0, 1] x 65535) and `<image_id>.json`."""
    png_path = out_dir / f"{image_id}.png"
    json_path = out_dir / f"{image_id}.json"
    save_map_16bit(png_path, anomaly_map.scores)
    sidecar = {
        "image_id": image_id,
        "image_score": anomaly_map.image_score,
        "localization_ok": localization_ok,
    }
    json_path.write_text(json.dumps(sidecar, indent=2))
    return png_path, json_path


def load_anomaly_map(png_path: Path) -> AnomalyMap:
    return AnomalyMap(load_map_16bit(png_path))
