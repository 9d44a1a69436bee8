"""PCK metric, the four evaluation protocols and report formatting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig
from .data import AnnotatedImage, DatasetIndex, Episode, ImageStore, norm_to_pixel, sample_episode, split_images
from .trainer import Checkpoint, episode_seed

PROTOCOLS = ("seen_base", "seen_novel", "unseen_base", "unseen_novel")


class MetricError(ValueError):
    pass


def pck_hits(pred: np.ndarray, gt: np.ndarray, bboxes: np.ndarray, tau: float, vis: np.ndarray) -> tuple[int, int]:
    """(correct, total) over visible keypoints; pixel arrays ``(P, 2)``, bboxes ``(P, 4)``."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    pred, gt, bboxes = np.asarray(pred, float), np.asarray(gt, float), np.asarray(bboxes, float)
    vis = np.asarray(vis).astype(bool)
    side = np.maximum(bboxes[:, 2] - bboxes[:, 0], bboxes[:, 3] - bboxes[:, 1])
    dist = np.linalg.norm(pred - gt, axis=-1)
    correct = (dist <= tau * side) & vis
    return int(correct.sum()), int(vis.sum())


def pck(predictions, ground_truths, bboxes, tau: float, visibility) -> float:
    correct, total = pck_hits(predictions, ground_truths, bboxes, tau, visibility)
    if total == 0:
        raise MetricError("PCK is undefined with no visible keypoints")
    return 100.0 * correct / total


@dataclass
class EvalReport:
    protocol: str
    per_class: dict[str, float]
    mean: float
    n_episodes: int
    config_hash: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def predict_episode(model, store: ImageStore, episode: Episode) -> tuple[np.ndarray, np.ndarray]:
    """Normalized predictions ``(M, N, 2)`` and per-scale points ``(S, M, N, 2)``."""
    ids = episode.keypoint_ids
    cs, vs = zip(*(store.keypoints(im, ids) for im in episode.support))
    pred, per_scale, _ = model.predict(
        store.batch(episode.support), torch.stack(cs), torch.stack(vs), store.batch(episode.query)
    )
    return pred.numpy(), per_scale.numpy()


def protocol_pools(
    protocol: str, index: DatasetIndex, config: RunConfig, checkpoint: Checkpoint | None
) -> tuple[list[AnnotatedImage], list[AnnotatedImage], list[int], list[str]]:
    """(query pool, support pool, keypoint ids, classes) for one protocol."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    seen, novel = protocol.split("_")
    splits = split_images(index, config)
    trained = set(checkpoint.train_classes) if checkpoint else set(index.classes) - set(config.unseen_classes)
    if seen == "seen":
        queries, supports = splits["test"], splits["train"]
        classes = sorted({im.class_label for im in queries})
    else:
        if not config.unseen_classes:
            raise ConfigError(f"{protocol} needs unseen_classes in the config")
        overlap = trained & set(config.unseen_classes)
        if overlap:
            raise ConfigError(f"{protocol}: classes {sorted(overlap)} were seen in training")
        queries = supports = splits["unseen"]
        classes = sorted(set(config.unseen_classes))
    if novel == "novel":
        ids = list(index.novel_keypoints)
        if not ids:
            raise ConfigError(f"{protocol}: the dataset declares no novel keypoints")
        base = set(checkpoint.base_keypoints) if checkpoint else set(index.base_keypoints)
        if base & set(ids):
            raise ConfigError(f"{protocol}: novel keypoints {sorted(base & set(ids))} were trained as base")
    else:
        ids = list(index.base_keypoints)
    return queries, supports, ids, classes


def evaluate(
    checkpoint: Checkpoint | None,
    index: DatasetIndex,
    protocol: str,
    config: RunConfig,
    *,
    model=None,
) -> EvalReport:
    """Per-class and mean PCK@tau over ``config.eval_episodes`` episodes, classes taken round-robin."""
    digest = config.digest()
    if config.eval_m_query is not None:
        config = config.replace(m_query=config.eval_m_query)
    queries, supports, ids, classes = protocol_pools(protocol, index, config, checkpoint)
    if model is None:
        if checkpoint is None:
            raise ValueError("evaluate needs a checkpoint or a model")
        model = checkpoint.model(config)
    model.eval()
    store = ImageStore(index, config)
    same_pool = supports is queries
    hits = {c: [0, 0] for c in classes}
    for i in range(config.eval_episodes):
        label = classes[i % len(classes)]
        episode = sample_episode(
            index, config, episode_seed(config.seed, protocol, i),
            images=queries, keypoint_ids=ids, class_label=label,
            support_pool=None if same_pool else supports,
        )
        pred, _ = predict_episode(model, store, episode)
        for m, q in enumerate(episode.query):
            p_pix = np.array([norm_to_pixel(tuple(p), q.width, q.height) for p in pred[m]])
            g_pix = np.array([norm_to_pixel(q.keypoints[j].u, q.width, q.height) for j in ids])
            vis = np.array([q.keypoints[j].v for j in ids])
            c, t = pck_hits(p_pix, g_pix, np.tile(q.bbox, (len(ids), 1)), config.tau, vis)
            hits[label][0] += c
            hits[label][1] += t
    per_class = {c: 100.0 * h[0] / h[1] for c, h in hits.items() if h[1] > 0}
    if not per_class:
        raise MetricError(f"{protocol}: no visible keypoints in any evaluation episode")
    mean = float(np.mean(list(per_class.values())))
    return EvalReport(protocol, per_class, mean, config.eval_episodes, digest)


def format_table(reports: list[EvalReport]) -> str:
    """Aligned text table: one row per report, one column per class plus the mean."""
    classes = sorted({c for r in reports for c in r.per_class})
    header = ["protocol", *classes, "mean", "episodes"]
    rows = [
        [r.protocol, *(f"{r.per_class[c]:.2f}" if c in r.per_class else "-" for c in classes),
         f"{r.mean:.2f}", str(r.n_episodes)]
        for r in reports
    ]
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
    fmt = lambda row: "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule, *map(fmt, rows)]) + "\n"


def load_reports(paths: list[str | Path]) -> list[EvalReport]:
    return [EvalReport.from_json(Path(p).read_text()) for p in paths]
