"""Episodic training: per-episode loss breakdown, the optimisation loop and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, from_dict
from .data import DatasetIndex, Episode, ImageStore, Jitter, sample_episode, sample_jitter, split_images
from .data.annotations import Modality
from .data.episodes import SamplingError
from .destyle import style_loss
from .domainadapt import query_prototype, transport_loss
from .locator import classification_loss_from_logits, encode_grid_target, offset_loss
from .matcher import build_prototypes
from .model import SketchKPModel, build_model

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sketchkp-checkpoint"
CHECKPOINT_VERSION = 1
PARTS = ("kp", "kp_aux", "da", "da_aux", "style", "style_aux")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class LossBreakdown:
    kp: torch.Tensor
    kp_aux: torch.Tensor
    da: torch.Tensor
    da_aux: torch.Tensor
    style: torch.Tensor
    style_aux: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in (*PARTS, "total")}


def total_loss(kp, kp_aux, da, da_aux, style, style_aux, config: RunConfig):
    parts = dict(kp=kp, kp_aux=kp_aux, da=da, da_aux=da_aux, style=style, style_aux=style_aux)
    bad = {k: float(v) for k, v in parts.items() if not math.isfinite(float(torch.as_tensor(v).detach()))}
    if bad:
        raise NonFiniteLoss(f"non-finite loss parts: {bad}")
    return (
        config.lambda_kp * (kp + kp_aux)
        + config.lambda_da * (da + da_aux)
        + config.lambda_style * (style + style_aux)
    )


def episode_seed(seed: int, *tags) -> int:
    words = [int(seed)] + [int(t) if isinstance(t, (int, np.integer)) else zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def _keypoint_loss(model: SketchKPModel, psi, coords, valid) -> torch.Tensor:
    """Cross-entropy on grid cells plus L1 on in-cell offsets, averaged over valid (m, n), summed over scales."""
    if not bool(valid.any()):
        return psi.new_zeros(())
    psi, coords = psi[valid], coords[valid]
    loss = psi.new_zeros(())
    for i, scale in enumerate(model.locator.scales):
        label, offset = encode_grid_target(coords, scale)
        cls = classification_loss_from_logits(model.locator.logits(psi, i), label)
        dev = offset_loss(model.locator.regress_offset(psi, i), offset.to(psi.dtype))
        loss = loss + cls.mean() + dev.mean()
    return loss


def run_episode(
    episode: Episode,
    model: SketchKPModel,
    config: RunConfig,
    store: ImageStore,
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """Loss breakdown for one episode. With ``rng`` and a nonzero augment setting, every image is jittered."""
    ids = episode.keypoint_ids
    k, n = len(episode.support), len(ids)
    use_aux = config.use_aux and bool(episode.aux_spec)
    use_da = config.lambda_da > 0
    use_style = config.lambda_style > 0 and episode.has_companions

    jitter = lambda: Jitter()
    augment = config.augment_scale > 0 or config.augment_shift > 0 or config.augment_rotate > 0 or config.augment_color
    if rng is not None and augment:
        jitter = lambda: sample_jitter(
            rng, config.augment_scale, config.augment_shift, config.augment_color, config.augment_rotate
        )
    s_jit = [jitter() for _ in episode.support]
    q_jit = [jitter() for _ in episode.query]

    def coords_of(images, jits):
        cs, vs = [], []
        for im, jit in zip(images, jits):
            c, v = store.keypoints(im, ids)
            if use_aux:
                ac, av = store.auxiliary(im)
                c, v = torch.cat([c, ac]), torch.cat([v, av])
            c, v = jit.points(c, v)
            cs.append(c)
            vs.append(v)
        return torch.stack(cs), torch.stack(vs)

    def images_of(images, jits):
        out = []
        for im, jit in zip(images, jits):
            jit = jit if im.modality is Modality.PHOTO else jit.geometric()
            out.append(jit.images(store.tensor(im)[None]))
        return torch.cat(out)

    s_coords, s_vis = coords_of(episode.support, s_jit)
    q_coords, q_vis = coords_of(episode.query, q_jit)

    batch = [images_of(episode.support, s_jit)]
    if use_style:
        batch += [images_of([c[0] for c in episode.companions], s_jit), images_of([c[1] for c in episode.companions], s_jit)]
    batch.append(images_of(episode.query, q_jit))
    feats = model.encoder(torch.cat(batch))
    f_s, f_q = feats[:k], feats[len(feats) - len(episode.query):]

    _, delta = model.support_embeddings(f_s, s_coords)
    mu, proto_vis = build_prototypes(delta, s_vis)
    psi = model.describe(f_q, mu)
    valid = (q_vis > 0) & proto_vis[None, :]

    zero = feats.new_zeros(())
    main, aux = slice(0, n), slice(n, None)
    kp = _keypoint_loss(model, psi[:, main], q_coords[:, main], valid[:, main])
    kp_aux = _keypoint_loss(model, psi[:, aux], q_coords[:, aux], valid[:, aux]) if use_aux else zero

    da = da_aux = zero
    if use_da:
        emb = model.pool(f_q, q_coords)  # query embeddings are not de-stylized
        mask = q_vis > 0
        qp = query_prototype(emb, mask, mu)
        da = transport_loss(mu[main], proto_vis[main], emb[:, main], mask[:, main], qp.select(main))
        if use_aux:
            da_aux = transport_loss(mu[aux], proto_vis[aux], emb[:, aux], mask[:, aux], qp.select(aux))

    style = style_aux = zero
    if use_style:
        _, d1 = model.support_embeddings(feats[k:2 * k], s_coords)
        _, d2 = model.support_embeddings(feats[2 * k:3 * k], s_coords)
        style = style_loss(delta[:, main], d1[:, main], d2[:, main], s_vis[:, main])
        if use_aux:
            style_aux = style_loss(delta[:, aux], d1[:, aux], d2[:, aux], s_vis[:, aux])

    total = total_loss(kp, kp_aux, da, da_aux, style, style_aux, config)
    return LossBreakdown(kp, kp_aux, da, da_aux, style, style_aux, total)


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    state_dict: dict
    config: RunConfig
    iteration: int
    base_keypoints: list[int]
    train_classes: list[str]

    def payload(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "iteration": self.iteration,
            "base_keypoints": list(self.base_keypoints),
            "train_classes": list(self.train_classes),
            "state_dict": self.state_dict,
        }

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save(self.payload(), buf)
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a sketchkp checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
        return cls(
            payload["state_dict"],
            from_dict(payload["config"]),
            payload["iteration"],
            payload["base_keypoints"],
            payload["train_classes"],
        )

    def model(self, config: RunConfig | None = None) -> SketchKPModel:
        model = build_model(self.config if config is None else config)
        model.load_state_dict(self.state_dict)
        return model.eval()


def snapshot(model: SketchKPModel, config: RunConfig, iteration: int, index: DatasetIndex) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    train_classes = [c for c in index.classes if c not in set(config.unseen_classes)]
    return Checkpoint(state, config, iteration, list(index.base_keypoints), train_classes)


# -- training loop -----------------------------------------------------------------

def check_dataset(config: RunConfig, index: DatasetIndex) -> None:
    if config.n_base is not None and config.n_base != len(index.base_keypoints):
        raise ConfigError(f"config n_base={config.n_base} but the dataset declares {len(index.base_keypoints)}")
    if config.n_novel is not None and config.n_novel != len(index.novel_keypoints):
        raise ConfigError(f"config n_novel={config.n_novel} but the dataset declares {len(index.novel_keypoints)}")
    pairs = config.aux_pairs if config.aux_pairs is not None else index.aux_pairs
    if config.use_aux:
        if not pairs:
            raise ConfigError("use_aux is set but no auxiliary pairs are declared")
        base = set(index.base_keypoints)
        for a, b in pairs:
            if a not in base or b not in base:
                raise ConfigError(f"auxiliary pair ({a}, {b}) is not made of base keypoints")
    missing = set(config.unseen_classes) - set(index.classes)
    if missing:
        raise ConfigError(f"unseen classes not in dataset: {sorted(missing)}")


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def train(
    config: RunConfig,
    index: DatasetIndex,
    *,
    log_path: str | Path | None = None,
    progress: bool = False,
) -> Checkpoint:
    check_dataset(config, index)
    seed_everything(config.seed)
    torch.use_deterministic_algorithms(True)
    model = build_model(config)
    model.train()
    store = ImageStore(index, config)
    pool = split_images(index, config)["train"]
    try:
        sample_episode(index, config, 0, images=pool)
    except SamplingError as exc:
        raise ConfigError(f"training pool cannot form an episode: {exc}") from None

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    sched = None
    if config.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.iterations)
    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_path) if log_path else run_dir / "train_log.jsonl"

    iterator = range(1, config.iterations + 1)
    if progress:
        from tqdm import tqdm

        iterator = tqdm(iterator, desc="train", unit="ep")
    with open(log_path, "w") as logf:
        for it in iterator:
            episode = sample_episode(index, config, episode_seed(config.seed, it), images=pool)
            rng = np.random.default_rng(episode_seed(config.seed, it, "augment"))
            losses = run_episode(episode, model, config, store, rng)
            opt.zero_grad(set_to_none=True)
            if losses.total.requires_grad:
                losses.total.backward()
                if config.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
                opt.step()
            if sched is not None:
                sched.step()
            logf.write(json.dumps({"iteration": it, **losses.as_floats()}) + "\n")
            if config.checkpoint_every and it % config.checkpoint_every == 0 and it < config.iterations:
                snapshot(model, config, it, index).save(run_dir / f"ckpt_{it:06d}.pt")
    ckpt = snapshot(model, config, config.iterations, index)
    ckpt.save(run_dir / "final.pt")
    return ckpt
