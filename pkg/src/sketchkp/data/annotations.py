"""Annotation index loading and coordinate conventions.

Normalized coordinates map pixel ``0`` to ``-1`` and pixel ``W`` (the far
image border) to ``+1`` on each axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from PIL import Image


class AnnotationError(ValueError):
    pass


class Modality(str, Enum):
    PHOTO = "photo"
    EDGEMAP_S = "edgemap_S"
    EDGEMAP_S1 = "edgemap_S1"
    EDGEMAP_S2 = "edgemap_S2"
    SKETCH = "sketch"


@dataclass(frozen=True)
class KeypointAnnotation:
    name: str
    u: tuple[float, float]
    v: int

    def __post_init__(self):
        if self.v not in (0, 1):
            raise AnnotationError(f"keypoint {self.name!r}: visibility must be 0 or 1, got {self.v}")
        if not all(-1.0 <= c <= 1.0 for c in self.u):
            raise AnnotationError(f"keypoint {self.name!r}: coordinate {self.u} outside [-1, 1]")


@dataclass(frozen=True)
class AnnotatedImage:
    image_path: str
    class_label: str
    bbox: tuple[float, float, float, float]
    keypoints: tuple[KeypointAnnotation, ...]
    width: int
    height: int
    modality: Modality = Modality.PHOTO
    source_stem: str | None = None  # set on style variants: the photo's stem

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if x1 <= x0 or y1 <= y0:
            raise AnnotationError(f"{self.image_path}: bbox {self.bbox} has non-positive size")

    @property
    def stem(self) -> str:
        return self.source_stem or Path(self.image_path).stem

    def with_modality(self, modality: Modality, path: str) -> "AnnotatedImage":
        return replace(self, modality=modality, image_path=path, source_stem=self.stem)


@dataclass
class DatasetIndex:
    keypoint_names: list[str]
    base_keypoints: list[int]
    novel_keypoints: list[int]
    aux_pairs: list[tuple[int, int]]
    images: list[AnnotatedImage]
    root: Path = field(default_factory=Path)

    @property
    def classes(self) -> list[str]:
        return sorted({im.class_label for im in self.images})

    def by_class(self, images: list[AnnotatedImage] | None = None) -> dict[str, list[AnnotatedImage]]:
        out: dict[str, list[AnnotatedImage]] = {}
        for im in self.images if images is None else images:
            out.setdefault(im.class_label, []).append(im)
        return out


def pixel_to_norm(x: float, y: float, width: float, height: float) -> tuple[float, float]:
    return 2.0 * x / width - 1.0, 2.0 * y / height - 1.0


def norm_to_pixel(u: tuple[float, float], width: float, height: float) -> tuple[float, float]:
    return (u[0] + 1.0) * 0.5 * width, (u[1] + 1.0) * 0.5 * height


def _image_size(path: Path, record: dict) -> tuple[int, int]:
    if "width" in record and "height" in record:
        return int(record["width"]), int(record["height"])
    with Image.open(path) as im:
        return im.size


def _parse_image(record: dict, names: list[str], root: Path) -> AnnotatedImage:
    path = record.get("path", "<missing path>")
    try:
        full = Path(path) if Path(path).is_absolute() else root / path
        width, height = _image_size(full, record)
        bbox = tuple(float(b) for b in record["bbox"])
        if len(bbox) != 4:
            raise AnnotationError("bbox must have 4 entries")
        raw = record["keypoints"]
        if len(raw) != len(names):
            raise AnnotationError(f"expected {len(names)} keypoints, got {len(raw)}")
        kps = []
        for name, kp in zip(names, raw):
            x, y, v = float(kp["x"]), float(kp["y"]), int(kp["v"])
            if not (0.0 <= x <= width and 0.0 <= y <= height):
                raise AnnotationError(f"keypoint {name!r} at ({x}, {y}) outside {width}x{height} image")
            kps.append(KeypointAnnotation(name, pixel_to_norm(x, y, width, height), v))
        return AnnotatedImage(
            image_path=str(full),
            class_label=str(record["class"]),
            bbox=bbox,
            keypoints=tuple(kps),
            width=width,
            height=height,
            modality=Modality(record.get("modality", "photo")),
        )
    except AnnotationError as exc:
        raise AnnotationError(f"{path}: {exc}") from None
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise AnnotationError(f"{path}: malformed record ({type(exc).__name__}: {exc})") from None


def load_annotations(index_path: str | Path) -> DatasetIndex:
    index_path = Path(index_path)
    if not index_path.exists():
        raise FileNotFoundError(f"annotation index not found: {index_path}")
    with open(index_path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"{index_path}: not valid JSON ({exc})") from None
    try:
        names = [str(n) for n in doc["keypoint_names"]]
        base = [int(i) for i in doc.get("base_keypoints", range(len(names)))]
        novel = [int(i) for i in doc.get("novel_keypoints", [])]
        pairs = [(int(a), int(b)) for a, b in doc.get("aux_pairs", [])]
        records = doc["images"]
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationError(f"{index_path}: malformed header ({exc})") from None
    for i in base + novel + [j for p in pairs for j in p]:
        if not 0 <= i < len(names):
            raise AnnotationError(f"{index_path}: keypoint index {i} out of vocabulary")
    if set(base) & set(novel):
        raise AnnotationError(f"{index_path}: base and novel keypoints overlap")
    images = [_parse_image(r, names, index_path.parent) for r in records]
    return DatasetIndex(names, base, novel, pairs, images, index_path.parent)


def dump_index(index: DatasetIndex, path: str | Path) -> None:
    """Write ``index`` back out in the on-disk (pixel unit) schema."""
    path = Path(path)
    images = []
    for im in index.images:
        kps = []
        for kp in im.keypoints:
            x, y = norm_to_pixel(kp.u, im.width, im.height)
            kps.append({"x": x, "y": y, "v": kp.v})
        try:
            rel = str(Path(im.image_path).relative_to(path.parent))
        except ValueError:
            rel = im.image_path
        images.append({"path": rel, "class": im.class_label, "bbox": list(im.bbox),
                       "width": im.width, "height": im.height, "keypoints": kps})
    doc = {
        "keypoint_names": index.keypoint_names,
        "base_keypoints": index.base_keypoints,
        "novel_keypoints": index.novel_keypoints,
        "aux_pairs": [list(p) for p in index.aux_pairs],
        "images": images,
    }
    path.write_text(json.dumps(doc, indent=1))
