"""Train/test splits, episode sampling and in-memory image tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import cv2
import numpy as np
import torch

from ..config import RunConfig
from .annotations import AnnotatedImage, DatasetIndex, Modality
from .auxiliary import auxiliary_arrays, generate_auxiliary_keypoints, load_saliency
from .edgemaps import cache_path, read_rgb


class SamplingError(ValueError):
    pass


IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class Episode:
    support: list[AnnotatedImage]
    query: list[AnnotatedImage]
    keypoint_ids: list[int]
    # per support item: (S1, S2) companions, or None when unavailable
    companions: list[tuple[AnnotatedImage, AnnotatedImage] | None] = field(default_factory=list)
    aux_spec: list[tuple[int, float]] = field(default_factory=list)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.support), len(self.query), len(self.keypoint_ids)

    @property
    def has_companions(self) -> bool:
        return bool(self.companions) and all(c is not None for c in self.companions)


def split_images(index: DatasetIndex, config: RunConfig, seed: int = 0) -> dict[str, list[AnnotatedImage]]:
    """Per seen class, a seeded ``split_ratio`` train/test split; unseen classes go whole to ``unseen``."""
    rng = np.random.default_rng(seed)
    train, test, unseen = [], [], []
    unseen_set = set(config.unseen_classes)
    for label, images in sorted(index.by_class().items()):
        if label in unseen_set:
            unseen.extend(images)
            continue
        order = rng.permutation(len(images))
        n_train = int(round(config.split_ratio * len(images)))
        train.extend(images[i] for i in sorted(order[:n_train]))
        test.extend(images[i] for i in sorted(order[n_train:]))
    return {"train": train, "test": test, "unseen": unseen}


def _variant(image: AnnotatedImage, cache_dir: str | None, slot: str) -> AnnotatedImage | None:
    if cache_dir is None:
        return None
    path = cache_path(cache_dir, image.stem, slot)
    if not path.exists():
        return None
    return image.with_modality(Modality(f"edgemap_{slot}"), str(path))


def support_views(
    image: AnnotatedImage, config: RunConfig
) -> tuple[AnnotatedImage, tuple[AnnotatedImage, AnnotatedImage] | None]:
    """Primary support view plus its two style companions for the configured modality mode."""
    if image.modality is Modality.SKETCH:
        return image, None
    mode = config.modality_mode
    if mode == "photo_support":
        return image, None
    s = _variant(image, config.cache_dir, "S")
    if mode == "multimodal":
        s1 = _variant(image, config.cache_dir, "S1")
        return image, (s, s1) if s is not None and s1 is not None else None
    if s is None:
        raise SamplingError(
            f"no S edgemap cached for {image.stem} in {config.cache_dir}; run make-edgemaps first"
        )
    s1 = _variant(image, config.cache_dir, "S1")
    s2 = _variant(image, config.cache_dir, "S2")
    return s, (s1, s2) if s1 is not None and s2 is not None else None


def sample_episode(
    index: DatasetIndex,
    config: RunConfig,
    rng_seed: int,
    *,
    images: list[AnnotatedImage] | None = None,
    keypoint_ids: list[int] | None = None,
    class_label: str | None = None,
    support_pool: list[AnnotatedImage] | None = None,
) -> Episode:
    """Draw one K-shot episode; a pure function of its arguments.

    ``images`` restricts the pool (default: every image). With ``support_pool``
    the support comes from that pool and the queries from ``images``.
    """
    k, m = config.k_shot, config.m_query
    rng = np.random.default_rng(rng_seed)
    groups = index.by_class(images)
    support_groups = index.by_class(support_pool) if support_pool is not None else None

    def enough(label: str) -> bool:
        if support_groups is None:
            return len(groups.get(label, [])) >= k + m
        return len(groups.get(label, [])) >= m and len(support_groups.get(label, [])) >= k

    if class_label is not None:
        if not enough(class_label):
            have = len(groups.get(class_label, []))
            if support_groups is None:
                raise SamplingError(f"class {class_label!r} has {have} instances; an episode needs {k + m}")
            raise SamplingError(
                f"class {class_label!r} has {have} query and {len(support_groups.get(class_label, []))} "
                f"support instances; an episode needs {m} and {k}"
            )
        label = class_label
    else:
        eligible = [c for c in sorted(groups) if enough(c)]
        if not eligible:
            raise SamplingError(f"no class has the {k + m} instances an episode needs")
        label = eligible[rng.integers(len(eligible))]

    pool = groups[label]
    if support_groups is None:
        chosen = rng.choice(len(pool), size=k + m, replace=False)
        support_raw = [pool[i] for i in chosen[:k]]
        query = [pool[i] for i in chosen[k:]]
    else:
        spool = support_groups[label]
        support_raw = [spool[i] for i in rng.choice(len(spool), size=k, replace=False)]
        taken = {im.image_path for im in support_raw}
        qpool = [im for im in pool if im.image_path not in taken]
        if len(qpool) < m:
            raise SamplingError(f"class {label!r}: not enough query images disjoint from the support")
        query = [qpool[i] for i in rng.choice(len(qpool), size=m, replace=False)]

    support, companions = [], []
    for im in support_raw:
        primary, comp = support_views(im, config)
        support.append(primary)
        companions.append(comp)

    kp_ids = list(index.base_keypoints if keypoint_ids is None else keypoint_ids)
    pairs = _aux_pairs(index, config)
    aux_spec = [(p, t) for p in range(len(pairs)) for t in config.t_values] if config.use_aux else []
    return Episode(support, query, kp_ids, companions, aux_spec)


def _aux_pairs(index: DatasetIndex, config: RunConfig) -> list[tuple[int, int]]:
    if config.aux_pairs is not None:
        return [tuple(p) for p in config.aux_pairs]
    return list(index.aux_pairs)


class ImageStore:
    """Decoded, resized, normalized image tensors plus per-image keypoint arrays, memoized."""

    def __init__(self, index: DatasetIndex, config: RunConfig):
        self.index = index
        self.config = config
        self.pairs = _aux_pairs(index, config)
        self._tensor = lru_cache(maxsize=4096)(self._load_tensor)
        self._aux = lru_cache(maxsize=4096)(self._load_aux)

    def _load_tensor(self, path: str) -> torch.Tensor:
        size = self.config.image_size
        rgb = read_rgb(path)
        if rgb.shape[:2] != (size, size):
            rgb = cv2.resize(rgb, (size, size), interpolation=cv2.INTER_AREA)
        arr = (rgb.astype(np.float32) / 255.0 - IMAGENET_MEAN) / IMAGENET_STD
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))

    def tensor(self, image: AnnotatedImage | str) -> torch.Tensor:
        path = image if isinstance(image, str) else image.image_path
        return self._tensor(str(Path(path)))

    def batch(self, images: list[AnnotatedImage]) -> torch.Tensor:
        return torch.stack([self.tensor(im) for im in images])

    def keypoints(self, image: AnnotatedImage, ids: list[int]) -> tuple[torch.Tensor, torch.Tensor]:
        coords = torch.tensor([image.keypoints[i].u for i in ids], dtype=torch.float32).reshape(-1, 2)
        vis = torch.tensor([image.keypoints[i].v for i in ids], dtype=torch.float32)
        return coords, vis

    def _load_aux(self, image: AnnotatedImage) -> tuple[torch.Tensor, torch.Tensor]:
        mask = load_saliency(image, self.config.mask_dir)
        aux = generate_auxiliary_keypoints(image, self.pairs, list(self.config.t_values), mask)
        coords, vis = auxiliary_arrays(aux, len(self.pairs), list(self.config.t_values))
        return torch.from_numpy(coords), torch.from_numpy(vis)

    def auxiliary(self, image: AnnotatedImage) -> tuple[torch.Tensor, torch.Tensor]:
        # fixed per image; style variants share the photo's annotation and mask
        return self._aux(image)
