"""Synthetic randomized-polygon dataset for desk-scale training and tests.

Every image holds one filled six-vertex polygon; the vertices are the
keypoints. Writes photos, saliency masks, an S edgemap from the built-in
Canny detector, two extra edgemap styles standing in for external detectors,
and an annotation index.

    python -m sketchkp.synthetic OUT_DIR --images 50 --classes hexagon star
"""

from __future__ import annotations

import argparse
from pathlib import Path

import cv2
import numpy as np

from .data import AnnotatedImage, DatasetIndex, KeypointAnnotation, dump_index, pixel_to_norm, synthesize_edgemap
from .data.edgemaps import cache_path, write_png_atomic

# polar templates: (angle in degrees from "up", clockwise; relative radius)
SHAPES = {
    "hexagon": [(0, 1.0), (60, 1.0), (120, 1.0), (180, 1.0), (240, 1.0), (300, 1.0)],
    "star": [(0, 1.0), (60, 0.55), (120, 1.0), (180, 0.55), (240, 1.0), (300, 0.55)],
    "kite": [(0, 1.0), (55, 0.6), (125, 0.85), (180, 0.55), (235, 0.85), (305, 0.6)],
    "wide": [(0, 0.7), (70, 1.0), (110, 1.0), (180, 0.7), (250, 1.0), (290, 1.0)],
    "tall": [(0, 1.0), (40, 0.7), (140, 0.7), (180, 1.0), (220, 0.7), (320, 0.7)],
}
KEYPOINT_NAMES = [f"vertex{i}" for i in range(6)]
# novel vertices sit between base ones, so base and auxiliary targets cover the whole outline
BASE = [0, 1, 3, 4]
NOVEL = [2, 5]
AUX_PAIRS = [(0, 1), (1, 3), (3, 4), (4, 0), (0, 3), (1, 4)]


def polygon_vertices(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    template = SHAPES[shape]
    cx, cy = size / 2 + rng.uniform(-0.08, 0.08, 2) * size
    radius = rng.uniform(0.26, 0.36) * size
    rot = rng.uniform(-15, 15)
    pts = []
    for angle, rel in template:
        a = np.deg2rad(angle + rot + rng.uniform(-5, 5))
        r = radius * rel * rng.uniform(0.92, 1.08)
        pts.append((cx + r * np.sin(a), cy - r * np.cos(a)))
    return np.clip(np.array(pts), 1, size - 1)


def render_photo(vertices: np.ndarray, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    bg = rng.integers(0, 256, 3)
    fg = (bg + rng.integers(90, 166, 3)) % 256
    img = np.empty((size, size, 3), np.float32)
    img[:] = bg
    # soft background gradient
    ramp = np.linspace(-1, 1, size, dtype=np.float32)
    img += rng.uniform(-25, 25) * ramp[None, :, None] + rng.uniform(-25, 25) * ramp[:, None, None]
    mask = np.zeros((size, size), np.uint8)
    cv2.fillPoly(mask, [np.round(vertices).astype(np.int32)], 1)
    img[mask > 0] = fg
    img += rng.normal(0, 6, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8), mask


def edge_styles(photo: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two alternative edgemap styles: thick blurred strokes, and sparse broken strokes."""
    gray = cv2.cvtColor(photo, cv2.COLOR_RGB2GRAY)
    thick = cv2.Canny(cv2.GaussianBlur(gray, (7, 7), 2.0), 30, 90)
    thick = cv2.dilate(thick, np.ones((3, 3), np.uint8))
    sparse = cv2.Canny(gray, 60, 180)
    keep = rng.random(sparse.shape) > 0.35
    sparse = np.where(keep, sparse, 0).astype(np.uint8)
    to_rgb = lambda e: np.repeat(e[:, :, None], 3, axis=2)
    return to_rgb(thick), to_rgb(sparse)


def make_polygon_dataset(
    out_dir: str | Path,
    n_images: int = 50,
    classes: list[str] | tuple[str, ...] = ("hexagon", "star"),
    size: int = 128,
    seed: int = 0,
    p_occluded: float = 0.05,
) -> Path:
    """Generate the dataset under ``out_dir`` and return the path of its index."""
    out = Path(out_dir)
    for sub in ("images", "masks", "edgemaps"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    images = []
    for i in range(n_images):
        shape = classes[i % len(classes)]
        stem = f"{shape}_{i:03d}"
        verts = polygon_vertices(shape, size, rng)
        photo, mask = render_photo(verts, size, rng)
        write_png_atomic(photo, out / "images" / f"{stem}.png")
        write_png_atomic(mask * 255, out / "masks" / f"{stem}.mask.png")
        synthesize_edgemap(photo, "canny_builtin", out / "edgemaps", stem)
        s1, s2 = edge_styles(photo, rng)
        write_png_atomic(s1, cache_path(out / "edgemaps", stem, "S1"))
        write_png_atomic(s2, cache_path(out / "edgemaps", stem, "S2"))
        vis = (rng.random(6) >= p_occluded).astype(int)
        kps = tuple(
            KeypointAnnotation(name, pixel_to_norm(x, y, size, size), int(v))
            for name, (x, y), v in zip(KEYPOINT_NAMES, verts, vis)
        )
        x0, y0 = verts.min(axis=0)
        x1, y1 = verts.max(axis=0)
        images.append(AnnotatedImage(str(out / "images" / f"{stem}.png"), shape,
                                     (float(x0), float(y0), float(x1), float(y1)), kps, size, size))
    index = DatasetIndex(KEYPOINT_NAMES, BASE, NOVEL, AUX_PAIRS, images, out)
    dump_index(index, out / "index.json")
    return out / "index.json"


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--images", type=int, default=50)
    ap.add_argument("--classes", nargs="+", default=["hexagon", "star"], choices=sorted(SHAPES))
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    path = make_polygon_dataset(args.out_dir, args.images, args.classes, args.size, args.seed)
    print(path)


if __name__ == "__main__":
    main()
