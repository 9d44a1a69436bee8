"""The full network: shared encoder, de-stylization, descriptor and grid locator."""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import RunConfig
from .destyle import DestyleNet, global_pool
from .encoder import build_encoder, gaussian_pool
from .locator import GridLocator
from .matcher import Descriptor, build_prototypes, correlate


class SketchKPModel(nn.Module):
    def __init__(self, config: RunConfig):
        super().__init__()
        self.encoder = build_encoder(config)
        c = self.encoder.channels
        self.destyle = DestyleNet(c, identity=config.destyle_identity)
        self.descriptor = Descriptor(c, self.encoder.feature_size)
        self.locator = GridLocator(self.descriptor.out_dim, config.locator_scales)
        self.xi = float(config.xi)

    @property
    def stride(self) -> int:
        return self.encoder.stride

    def pool(self, feats: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        return gaussian_pool(feats, coords, self.xi, self.stride)

    def support_embeddings(self, feats: torch.Tensor, coords: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw ``(K, N, c)`` and de-stylized keypoint embeddings of support features."""
        phi = self.pool(feats, coords)
        return phi, self.destyle(phi, global_pool(feats))

    def describe(self, f_q: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
        """Descriptors ``(M, N, d)`` of query features correlated with each prototype."""
        return self.descriptor(correlate(f_q, mu))

    @torch.no_grad()
    def predict(
        self,
        support: torch.Tensor,
        coords: torch.Tensor,
        vis: torch.Tensor,
        query: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Predicted ``(M, N, 2)`` locations, per-scale points ``(S, M, N, 2)`` and prototype visibility."""
        k = support.shape[0]
        feats = self.encoder(torch.cat([support, query]))
        _, delta = self.support_embeddings(feats[:k], coords)
        mu, proto_vis = build_prototypes(delta, vis)
        psi = self.describe(feats[k:], mu)
        pred, per_scale = self.locator.predict_keypoint(psi)
        return pred, per_scale, proto_vis


def build_model(config: RunConfig) -> SketchKPModel:
    return SketchKPModel(config)
