"""Run configuration: one flat, validated record of every hyperparameter.

Config files are TOML. Sections are flattened into dotted keys and a dotted
key ``encoder.backbone`` maps onto the field ``encoder_backbone``. CLI
overrides use the same ``key=value`` form and take precedence over the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


MODALITY_MODES = ("sketch_support", "photo_support", "multimodal")
LR_SCHEDULES = ("constant", "cosine")
BACKBONES = ("reference", "tiny")

# lambda_style default for multimodal (photo + edgemap) training.
MULTIMODAL_LAMBDA_STYLE = 1e-8


@dataclass
class RunConfig:
    # data
    dataset: str | None = None
    cache_dir: str | None = None
    mask_dir: str | None = None
    run_dir: str = "runs/default"
    image_size: int = 384

    # episode shape
    k_shot: int = 1
    m_query: int = 5
    n_base: int | None = None
    n_novel: int | None = None

    # pooling + loss weights
    xi: float = 14.0
    lambda_kp: float = 0.5
    lambda_da: float = 0.001
    lambda_style: float | None = None  # None -> 0.001, or 1e-8 in multimodal mode

    # auxiliary keypoints
    use_aux: bool = True
    t_values: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75])
    aux_pairs: list[list[int]] | None = None  # None -> taken from the dataset index

    # locator
    locator_scales: list[int] = field(default_factory=lambda: [8, 12, 16])

    # encoder / networks
    encoder_backbone: str = "reference"
    encoder_weights: str | None = None
    encoder_freeze: bool = False
    encoder_channels: int = 64  # tiny backbone only
    encoder_stride: int = 32  # tiny backbone only
    destyle_identity: bool = False  # True -> Z is the identity (B-Vanilla / B-DA)

    # optimisation
    iterations: int = 80000
    learning_rate: float = 1e-4
    lr_schedule: str = "constant"  # or "cosine": anneal to 0 over `iterations`
    grad_clip: float = 10.0  # 0 disables clipping
    checkpoint_every: int = 1000
    seed: int = 0
    modality_mode: str = "sketch_support"
    # training-time geometric jitter, off by default: scale in 1 +- augment_scale,
    # shift up to +-augment_shift in normalized units
    augment_scale: float = 0.0
    augment_shift: float = 0.0
    augment_rotate: float = 0.0  # max rotation in degrees
    # photos only: random channel permutation and per-channel inversion
    augment_color: bool = False

    # splits + evaluation
    unseen_classes: list[str] = field(default_factory=list)
    split_ratio: float = 0.7
    eval_episodes: int = 1000
    eval_m_query: int | None = None  # queries per evaluation episode; None -> m_query
    tau: float = 0.1

    # built-in edge detector
    canny_low: int = 100
    canny_high: int = 200

    def __post_init__(self) -> None:
        if self.lambda_style is None:
            self.lambda_style = (
                MULTIMODAL_LAMBDA_STYLE if self.modality_mode == "multimodal" else 0.001
            )
        self.validate()

    def validate(self) -> None:
        for name in ("lambda_kp", "lambda_da", "lambda_style"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.k_shot < 1 or self.m_query < 1:
            raise ConfigError("k_shot and m_query must be >= 1")
        if self.eval_m_query is not None and self.eval_m_query < 1:
            raise ConfigError("eval_m_query must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.xi <= 0:
            raise ConfigError("xi must be > 0")
        if self.modality_mode not in MODALITY_MODES:
            raise ConfigError(f"modality_mode must be one of {MODALITY_MODES}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.encoder_backbone not in BACKBONES:
            raise ConfigError(f"encoder.backbone must be one of {BACKBONES}")
        scales = list(self.locator_scales)
        if not scales or any(int(s) != s or s <= 0 for s in scales):
            raise ConfigError("locator.scales must be positive integers")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ConfigError("locator.scales must be strictly increasing")
        if any(not 0 < t < 1 for t in self.t_values):
            raise ConfigError("t_values must lie in (0, 1)")
        if not 0 < self.split_ratio < 1:
            raise ConfigError("split_ratio must lie in (0, 1)")
        if not 0 <= self.augment_scale < 1 or not 0 <= self.augment_shift < 1:
            raise ConfigError("augment_scale and augment_shift must lie in [0, 1)")
        if not 0 <= self.augment_rotate <= 180:
            raise ConfigError("augment_rotate must lie in [0, 180] degrees")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.image_size % self.stride != 0:
            raise ConfigError(
                f"image_size {self.image_size} is not a multiple of the encoder stride {self.stride}"
            )

    @property
    def stride(self) -> int:
        return 32 if self.encoder_backbone == "reference" else self.encoder_stride

    @property
    def feature_size(self) -> int:
        return self.image_size // self.stride

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes: Any) -> "RunConfig":
        return apply_overrides(self, changes)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _field_name(key: str) -> str:
    name = key.strip().replace(".", "_").replace("-", "_")
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return name


def _flatten(doc: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in doc.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def _parse_value(text: str) -> Any:
    # reuse the TOML value grammar; bare words fall back to strings
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_overrides(items: list[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        out[key] = _parse_value(text.strip())
    return out


def apply_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    values = config.to_dict()
    explicit_style = "lambda_style" in {_field_name(k) for k in overrides}
    for key, value in overrides.items():
        values[_field_name(key)] = value
    if not explicit_style and "modality_mode" in {_field_name(k) for k in overrides}:
        values["lambda_style"] = None
    return from_dict(values)


def from_dict(values: dict[str, Any]) -> RunConfig:
    kwargs = {}
    for key, value in _flatten(values).items():
        name = _field_name(key)
        ftype = _FIELDS[name].type
        if value is not None and ftype in ("float", "float | None") and isinstance(value, int):
            value = float(value)
        kwargs[name] = value
    return RunConfig(**kwargs)


def load_config(path: str | Path | None, overrides: list[str] | dict[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        with open(path, "rb") as fh:
            values = _flatten(tomllib.load(fh))
        # relative data paths resolve against the config file's directory
        for key in ("dataset", "cache_dir", "mask_dir", "run_dir", "encoder.weights"):
            if isinstance(values.get(key), str) and not Path(values[key]).is_absolute():
                values[key] = str((path.parent / values[key]).resolve())
    if isinstance(overrides, list):
        overrides = parse_overrides(overrides)
    for key, value in (overrides or {}).items():
        values[key] = value
    return from_dict(values)


def baseline(config: RunConfig, name: str) -> RunConfig:
    """Return ``config`` switched to one of the ablation baselines."""
    presets = {
        "B-Vanilla": dict(lambda_da=0.0, lambda_style=0.0, destyle_identity=True),
        "B-DA": dict(lambda_style=0.0, destyle_identity=True),
        "B-Style": dict(lambda_da=0.0, destyle_identity=False),
        "B-Full": dict(destyle_identity=False),
    }
    if name not in presets:
        raise ConfigError(f"unknown baseline {name!r}; choose from {sorted(presets)}")
    return apply_overrides(config, presets[name])
