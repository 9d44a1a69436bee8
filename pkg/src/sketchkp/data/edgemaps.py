"""Edgemap style variants and their on-disk cache.

Cache layout: ``<cache_dir>/<image_stem>.<S|S1|S2>.png``. Only Canny runs
in-process; the other detectors are consumed as precomputed files.
"""

from __future__ import annotations

import os
import tempfile
from enum import Enum
from pathlib import Path

import cv2
import numpy as np
from PIL import Image


class CacheMiss(FileNotFoundError):
    pass


class Detector(str, Enum):
    CANNY = "canny_builtin"
    EXTERNAL_S = "external_S"
    EXTERNAL_S1 = "external_S1"
    EXTERNAL_S2 = "external_S2"


SLOTS = ("S", "S1", "S2")
_EXTERNAL_SLOT = {Detector.EXTERNAL_S: "S", Detector.EXTERNAL_S1: "S1", Detector.EXTERNAL_S2: "S2"}


def cache_path(cache_dir: str | Path, stem: str, slot: str) -> Path:
    if slot not in SLOTS:
        raise ValueError(f"unknown edgemap slot {slot!r}")
    return Path(cache_dir) / f"{stem}.{slot}.png"


def canny(image: np.ndarray, low: int = 100, high: int = 200) -> np.ndarray:
    """Canny edges of an RGB uint8 raster, returned as a 3-channel raster."""
    gray = cv2.cvtColor(np.ascontiguousarray(image, dtype=np.uint8), cv2.COLOR_RGB2GRAY)
    edges = cv2.Canny(gray, low, high)
    return np.repeat(edges[:, :, None], 3, axis=2)


def write_png_atomic(array: np.ndarray, path: str | Path) -> None:
    # write-then-rename so concurrent readers never see a partial file
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".png", dir=path.parent)
    os.close(fd)
    try:
        Image.fromarray(array).save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def synthesize_edgemap(
    image: np.ndarray,
    detector: Detector | str,
    cache_dir: str | Path,
    stem: str,
    *,
    slot: str = "S",
    low: int = 100,
    high: int = 200,
) -> np.ndarray:
    """Return the edgemap for ``stem``, computing (Canny) or loading it from the cache.

    Canny results are written to ``slot`` once and reused afterwards.
    External detectors only ever read their own slot.
    """
    detector = Detector(detector)
    if detector is not Detector.CANNY:
        path = cache_path(cache_dir, stem, _EXTERNAL_SLOT[detector])
        if not path.exists():
            raise CacheMiss(
                f"no precomputed {detector.value} edgemap at {path}; run the external "
                f"detector and save its output under that name first"
            )
        return read_rgb(path)
    path = cache_path(cache_dir, stem, slot)
    if path.exists():
        return read_rgb(path)
    edges = canny(image, low, high)
    write_png_atomic(edges, path)
    return edges
