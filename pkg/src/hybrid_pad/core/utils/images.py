"""PNG I/O: 8-bit images, binary masks and 16-bit score maps."""
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from hybrid_pad.core.errors import SceneFormatError
from hybrid_pad.core.types import ImageBuffer

logger = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5


def _normalized_array(img: Image.Image) -> np.ndarray:
    """Pixel values scaled to [0, 1] for 8- and 16-bit modes."""
    arr = np.asarray(img, dtype=np.float64)
    if img.mode.startswith("I;16") or (img.mode == "I" and arr.max(initial=0) > 255):
        return arr / 65535.0
    return arr / 255.0


def load_image(path: Path, background: Sequence[float] = (1.0, 1.0, 1.0)) -> ImageBuffer:
    """Load an RGB(A) image; alpha is composited over `background`."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode == "RGBA" or (img.mode == "P" and "transparency" in img.info):
                rgba = np.asarray(img.convert("RGBA"), dtype=np.float32) / np.float32(255.0)
                alpha = rgba[:, :, 3:]
                bg = np.asarray(background, dtype=np.float32)
                pixels = np.round((rgba[:, :, :3] * alpha + bg * (1.0 - alpha)) * 255.0)
                return ImageBuffer.from_uint8(pixels.astype(np.uint8))
            return ImageBuffer.from_uint8(np.asarray(img.convert("RGB")))
    except FileNotFoundError as e:
        raise SceneFormatError("Missing image file", path) from e
    except OSError as e:
        raise SceneFormatError(f"Unreadable image ({e})", path) from e


def save_image(path: Path, image: ImageBuffer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = image.to_uint8()
    Image.fromarray(pixels[:, :, 0] if image.channels == 1 else pixels).save(path)


def load_mask(path: Path) -> np.ndarray:
    """Grayscale mask binarized at 0.5."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("I;16", "I;16B", "I;16L", "I"):
                img = img.convert("L")
            return _normalized_array(img) >= MASK_THRESHOLD
    except FileNotFoundError as e:
        raise SceneFormatError("Missing mask file", path) from e
    except OSError as e:
        raise SceneFormatError(f"Unreadable mask ({e})", path) from e


def save_mask(path: Path, mask: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def save_map_16bit(path: Path, scores: np.ndarray) -> None:
    """Scores in [0, 1] stored as 16-bit grayscale (value x 65535)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    quantized = np.round(np.clip(scores, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(quantized).save(path)


def load_map_16bit(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img, dtype=np.float64) / 65535.0
    except FileNotFoundError as e:
        raise SceneFormatError("Missing anomaly map", path) from e
