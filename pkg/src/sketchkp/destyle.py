"""De-stylization network and the style-consistency loss."""

from __future__ import annotations

import torch
import torch.nn as nn

from .encoder import ShapeError


class DestyleNet(nn.Module):
    """Fuses a keypoint embedding with the global context of its feature map.

    ctx = MLP1([phi; gap(f)]), fused = phi + ctx, out = MLP2(fused * sigmoid(fused)).
    With ``identity=True`` the network is bypassed (B-Vanilla / B-DA baselines).
    """

    def __init__(self, channels: int, identity: bool = False):
        super().__init__()
        self.channels = channels
        self.identity = identity
        self.context = nn.Sequential(
            nn.Linear(2 * channels, channels), nn.ReLU(inplace=True), nn.Linear(channels, channels)
        )
        self.project = nn.Sequential(
            nn.Linear(channels, channels), nn.ReLU(inplace=True), nn.Linear(channels, channels)
        )

    def forward(self, phi: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        """``phi`` is ``(..., N, c)`` keypoint embeddings, ``g`` the matching ``(..., c)`` global pool."""
        if self.identity:
            return phi
        if phi.shape[-1] != self.channels or g.shape[-1] != self.channels:
            raise ShapeError(
                f"destyle expects {self.channels} channels, got phi {tuple(phi.shape)} / g {tuple(g.shape)}"
            )
        g = g.unsqueeze(-2).expand_as(phi)
        fused = phi + self.context(torch.cat([phi, g], dim=-1))
        return self.project(fused * torch.sigmoid(fused))


def global_pool(f: torch.Tensor) -> torch.Tensor:
    return f.mean(dim=(-2, -1))


def destylize(net: DestyleNet, phi: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    if f.dim() == 3:
        return net(phi.unsqueeze(0) if phi.dim() == 1 else phi, global_pool(f)).reshape(phi.shape)
    return net(phi, global_pool(f))


def style_loss(
    delta: torch.Tensor, delta_s1: torch.Tensor, delta_s2: torch.Tensor, vis: torch.Tensor | None = None
) -> torch.Tensor:
    """Sum over visible keypoints of the three pairwise L2 distances between style variants.

    Inputs are ``(..., N, c)`` and ``vis`` is ``(..., N)``.
    """
    if not (delta.shape == delta_s1.shape == delta_s2.shape):
        raise ShapeError(
            f"style variants misaligned: {tuple(delta.shape)}, {tuple(delta_s1.shape)}, {tuple(delta_s2.shape)}"
        )
    dist = (
        torch.linalg.vector_norm(delta - delta_s1, dim=-1)
        + torch.linalg.vector_norm(delta - delta_s2, dim=-1)
        + torch.linalg.vector_norm(delta_s1 - delta_s2, dim=-1)
    )
    if vis is not None:
        if vis.shape != dist.shape:
            raise ShapeError(f"visibility {tuple(vis.shape)} does not match keypoints {tuple(dist.shape)}")
        dist = dist * vis
    return dist.sum()
