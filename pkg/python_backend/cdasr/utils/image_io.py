"""
Image file decoding / encoding (Pillow).
Arrays are H×W×C float64 in [0, 1].
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Union

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class ImageDecodeError(OSError):
    pass


def list_image_files(directory: Union[str, Path]) -> List[Path]:
    """Image files under `directory` (recursive), sorted by relative path."""
    root = Path(directory)
    files = [p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(files, key=lambda p: p.relative_to(root).as_posix())


def read_image(path: Union[str, Path], mode: str = "RGB") -> np.ndarray:
    try:
        with PILImage.open(path) as handle:
            handle.load()
            converted = handle.convert(mode)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc

    array = np.asarray(converted, dtype=np.float64) / 255.0
    if array.ndim == 2:
        array = array[:, :, None]
    return array


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: Union[str, Path], pixels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_uint8(pixels)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    PILImage.fromarray(data).save(path, format="PNG")
    return path
