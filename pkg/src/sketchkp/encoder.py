"""Image encoder and Gaussian pooling of keypoint embeddings."""

from __future__ import annotations

import logging
import math

import torch
import torch.nn as nn
import torchvision

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


def _tiny_widths(channels: int, stages: int) -> list[int]:
    widths = [max(8, channels >> (stages - 1 - i)) for i in range(stages)]
    widths[-1] = channels
    return widths


class TinyBackbone(nn.Module):
    """Small randomly initialized CNN, one stride-2 conv block per halving."""

    def __init__(self, channels: int = 64, stride: int = 32):
        super().__init__()
        stages = int(round(math.log2(stride)))
        if 2**stages != stride:
            raise ValueError(f"tiny backbone stride must be a power of two, got {stride}")
        layers: list[nn.Module] = []
        cin = 3
        for width in _tiny_widths(channels, stages):
            layers += [
                nn.Conv2d(cin, width, 3, 2, 1),
                nn.GroupNorm(min(8, width), width),
                nn.ReLU(inplace=True),
                nn.Conv2d(width, width, 3, 1, 1),
                nn.ReLU(inplace=True),
            ]
            cin = width
        self.body = nn.Sequential(*layers)
        self.channels = channels
        self.stride = stride

    def forward(self, x):
        return self.body(x)


class ReferenceBackbone(nn.Module):
    """ResNet-50 trunk up to ``layer4``: 2048 channels at stride 32."""

    def __init__(self, weights: str | None = None):
        super().__init__()
        net = torchvision.models.resnet50(weights=None)
        if weights:
            state = torch.load(weights, map_location="cpu", weights_only=True)
            missing, _ = net.load_state_dict(state, strict=False)
            if missing:
                log.warning("backbone weights %s missing %d tensors", weights, len(missing))
        else:
            log.warning("reference backbone has no pretrained weights (encoder.weights unset)")
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4
        )
        self.channels = 2048
        self.stride = 32

    def forward(self, x):
        return self.body(x)


class Encoder(nn.Module):
    def __init__(self, backbone: nn.Module, image_size: int, freeze: bool = False):
        super().__init__()
        self.backbone = backbone
        self.image_size = image_size
        self.freeze = freeze
        if freeze:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    @property
    def channels(self) -> int:
        return self.backbone.channels

    @property
    def stride(self) -> int:
        return self.backbone.stride

    @property
    def feature_size(self) -> int:
        return self.image_size // self.stride

    def train(self, mode: bool = True):
        super().train(mode)
        if self.freeze:
            self.backbone.eval()
        return self

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != (self.image_size,) * 2:
            raise ShapeError(
                f"encoder expects Bx3x{self.image_size}x{self.image_size} input, got {tuple(images.shape)}"
            )
        return self.backbone(images)


def build_encoder(config) -> Encoder:
    if config.encoder_backbone == "reference":
        backbone = ReferenceBackbone(config.encoder_weights)
    else:
        backbone = TinyBackbone(config.encoder_channels, config.encoder_stride)
    return Encoder(backbone, config.image_size, config.encoder_freeze)


def cell_centers(h: int, w: int, stride: float, dtype=torch.float32, device=None):
    ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) * stride
    xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) * stride
    return ys, xs


def gaussian_weights(u: torch.Tensor, h: int, w: int, stride: float, xi: float) -> torch.Tensor:
    """Unnormalized Gaussian weights ``(..., h, w)`` for normalized locations ``u`` ``(..., 2)``."""
    if xi <= 0:
        raise ValueError(f"xi must be > 0, got {xi}")
    ys, xs = cell_centers(h, w, stride, u.dtype, u.device)
    px = (u[..., 0] + 1.0) * 0.5 * (w * stride)
    py = (u[..., 1] + 1.0) * 0.5 * (h * stride)
    dx2 = (xs - px[..., None]) ** 2  # (..., w)
    dy2 = (ys - py[..., None]) ** 2  # (..., h)
    return torch.exp(-(dy2[..., :, None] + dx2[..., None, :]) / (2.0 * xi * xi))


def gaussian_pool(f: torch.Tensor, u: torch.Tensor, xi: float, stride: float) -> torch.Tensor:
    """Sum of feature vectors weighted by exp(-|x - u|^2 / 2 xi^2), distances in input pixels.

    ``f`` is ``(c, h, w)`` with ``u`` of any shape ``(..., 2)``, giving ``(..., c)``;
    or ``f`` is ``(B, c, h, w)`` with ``u`` ``(B, N, 2)``, giving ``(B, N, c)``.
    """
    h, w = f.shape[-2:]
    weights = gaussian_weights(u, h, w, stride, xi)
    if f.dim() == 3:
        return torch.einsum("...hw,chw->...c", weights, f)
    return torch.einsum("bnhw,bchw->bnc", weights, f)
