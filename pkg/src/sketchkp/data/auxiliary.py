"""Auxiliary keypoints interpolated between pairs of visible main keypoints."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .annotations import AnnotatedImage, KeypointAnnotation, norm_to_pixel


@dataclass(frozen=True)
class SaliencyMask:
    mask: np.ndarray  # bool, H x W at the image's native resolution
    source: str  # "precomputed_file" | "bbox_fallback"

    def contains(self, x: float, y: float) -> bool:
        h, w = self.mask.shape
        col = min(max(int(np.floor(x)), 0), w - 1)
        row = min(max(int(np.floor(y)), 0), h - 1)
        return bool(self.mask[row, col])


def bbox_mask(image: AnnotatedImage) -> SaliencyMask:
    x0, y0, x1, y1 = image.bbox
    # a pixel is inside when its centre lies inside the box
    cols = np.arange(image.width) + 0.5
    rows = np.arange(image.height) + 0.5
    inside = ((rows >= y0) & (rows <= y1))[:, None] & ((cols >= x0) & (cols <= x1))[None, :]
    return SaliencyMask(inside, "bbox_fallback")


def load_saliency(image: AnnotatedImage, mask_dir: str | Path | None) -> SaliencyMask:
    """Precomputed ``<mask_dir>/<stem>.mask.png`` (nonzero = salient) or the bbox fallback."""
    if mask_dir is not None:
        path = Path(mask_dir) / f"{image.stem}.mask.png"
        if path.exists():
            with Image.open(path) as im:
                mask = np.asarray(im.convert("L")) > 0
            if mask.shape != (image.height, image.width):
                raise ValueError(
                    f"{path}: mask is {mask.shape[1]}x{mask.shape[0]}, image is {image.width}x{image.height}"
                )
            return SaliencyMask(mask, "precomputed_file")
    return bbox_mask(image)


@dataclass(frozen=True)
class AuxiliaryKeypoint:
    pair_index: int
    t: float
    keypoint: KeypointAnnotation


def interpolate(t: float, u1: tuple[float, float], u2: tuple[float, float]) -> tuple[float, float]:
    return (u1[0] + t * (u2[0] - u1[0]), u1[1] + t * (u2[1] - u1[1]))


def generate_auxiliary_keypoints(
    annotation: AnnotatedImage,
    pairs: list[tuple[int, int]],
    t_values: list[float],
    mask: SaliencyMask,
) -> list[AuxiliaryKeypoint]:
    out = []
    kps = annotation.keypoints
    for p, (a, b) in enumerate(pairs):
        ka, kb = kps[a], kps[b]
        if not (ka.v and kb.v):
            continue
        for t in t_values:
            u = interpolate(t, ka.u, kb.u)
            x, y = norm_to_pixel(u, annotation.width, annotation.height)
            v = int(mask.contains(x, y))
            out.append(AuxiliaryKeypoint(p, t, KeypointAnnotation(f"aux{p}@{t:g}", u, v)))
    return out


def auxiliary_arrays(
    aux: list[AuxiliaryKeypoint], n_pairs: int, t_values: list[float]
) -> tuple[np.ndarray, np.ndarray]:
    """Align auxiliary points to fixed ``(pair, t)`` slots; missing slots are invisible."""
    slots = {(p, t): i for i, (p, t) in enumerate((p, t) for p in range(n_pairs) for t in t_values)}
    coords = np.zeros((len(slots), 2), dtype=np.float32)
    vis = np.zeros(len(slots), dtype=np.float32)
    for a in aux:
        i = slots[(a.pair_index, a.t)]
        coords[i] = a.keypoint.u
        vis[i] = a.keypoint.v
    return coords, vis
