"""Support prototypes, support-query correlation and the descriptor network."""

from __future__ import annotations

import torch
import torch.nn as nn

from .encoder import ShapeError


def build_prototypes(deltas: torch.Tensor, vis: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Visible-mean prototypes.

    ``deltas`` is ``(K, N, c)``, ``vis`` is ``(K, N)``. Returns ``(N, c)``
    prototypes and an ``(N,)`` bool visibility; keypoints seen in no support
    get a zero placeholder that callers must not consume.
    """
    if deltas.shape[:2] != vis.shape:
        raise ShapeError(f"deltas {tuple(deltas.shape)} and visibility {tuple(vis.shape)} disagree")
    w = vis.to(deltas.dtype)
    count = w.sum(dim=0)
    summed = (deltas * w[..., None]).sum(dim=0)
    protos = summed / count.clamp(min=1.0)[:, None]
    return protos, count > 0


def correlate(f_m: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    """Channelwise product of query features and prototypes.

    ``f_m`` ``(c, h, w)`` with ``mu`` ``(c,)`` gives ``(c, h, w)``;
    ``f_m`` ``(M, c, h, w)`` with ``mu`` ``(N, c)`` gives ``(M, N, c, h, w)``.
    """
    if f_m.shape[-3] != mu.shape[-1]:
        raise ShapeError(f"channel mismatch: features {f_m.shape[-3]}, prototype {mu.shape[-1]}")
    if f_m.dim() == 3 and mu.dim() == 1:
        return f_m * mu[:, None, None]
    return f_m[:, None] * mu[None, :, :, None, None]


def descriptor_channels(c: int) -> tuple[int, int, int]:
    # reference widths 2048 -> 512 -> 512 -> 1024, scaled with c
    return c // 4, c // 4, c // 2


def _conv_out(size: int) -> int:
    return (size + 2 - 3) // 2 + 1


class Descriptor(nn.Module):
    """Three stride-2 3x3 convolutions with ReLU, flattened."""

    def __init__(self, channels: int, feature_size: int):
        super().__init__()
        c1, c2, c3 = descriptor_channels(channels)
        self.net = nn.Sequential(
            nn.Conv2d(channels, c1, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(c2, c3, 3, 2, 1), nn.ReLU(inplace=True),
        )
        self.channels = channels
        self.feature_size = feature_size
        s = _conv_out(_conv_out(_conv_out(feature_size)))
        self.out_dim = c3 * s * s

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        lead = a.shape[:-3]
        if tuple(a.shape[-3:]) != (self.channels, self.feature_size, self.feature_size):
            raise ShapeError(
                f"descriptor expects (*, {self.channels}, {self.feature_size}, {self.feature_size}), "
                f"got {tuple(a.shape)}"
            )
        out = self.net(a.reshape(-1, *a.shape[-3:]))
        return out.reshape(*lead, -1)
