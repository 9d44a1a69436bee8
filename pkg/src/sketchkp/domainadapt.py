"""Supervised keypoint-level transport loss between support prototypes and query embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .encoder import gaussian_pool


@dataclass
class QueryPrototype:
    values: torch.Tensor  # (N, c), detached
    likelihood: torch.Tensor  # (N,), exp(-|mu_hat - mu|^2), detached
    present: torch.Tensor  # (N,) bool, at least one query embedding contributed
    gradient_isolated: bool = True

    def select(self, idx) -> "QueryPrototype":
        return QueryPrototype(self.values[idx], self.likelihood[idx], self.present[idx])


def extract_query_embeddings(
    f_m: torch.Tensor, locations: torch.Tensor, vis: torch.Tensor, xi: float, stride: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pooled embeddings ``(M, N, c)`` at ground-truth query locations ``(M, N, 2)``.

    Invisible keypoints are zeroed and flagged absent in the returned mask.
    """
    emb = gaussian_pool(f_m, locations, xi, stride)
    mask = vis > 0
    return emb * mask[..., None].to(emb.dtype), mask


def query_prototype(embeddings: torch.Tensor, mask: torch.Tensor, mu: torch.Tensor) -> QueryPrototype:
    """Mean of the present query embeddings per keypoint, cut from the autograd graph."""
    with torch.no_grad():
        w = mask.to(embeddings.dtype)
        count = w.sum(dim=0)
        mu_hat = (embeddings * w[..., None]).sum(dim=0) / count.clamp(min=1.0)[:, None]
        likelihood = torch.exp(-((mu_hat - mu) ** 2).sum(dim=-1))
    return QueryPrototype(mu_hat.detach(), likelihood.detach(), count > 0)


def transport_loss(
    mu: torch.Tensor,
    proto_vis: torch.Tensor,
    embeddings: torch.Tensor,
    mask: torch.Tensor,
    qproto: QueryPrototype | None = None,
) -> torch.Tensor:
    """Sum over contributing (m, n) of p(mu_hat_n) * |mu_n - phi_mn| * exp(-|mu_n - phi_mn|^2).

    ``mu`` is ``(N, c)``, ``embeddings`` ``(M, N, c)``, ``mask`` ``(M, N)``.
    ``qproto`` is computed (detached) when not supplied.
    """
    if qproto is None:
        qproto = query_prototype(embeddings, mask, mu)
    contributing = mask & proto_vis.bool()[None, :]
    cost = torch.linalg.vector_norm(mu[None] - embeddings, dim=-1)
    sim = torch.exp(-cost**2)
    per_pair = qproto.likelihood[None, :] * cost * sim
    return torch.where(contributing, per_pair, torch.zeros_like(per_pair)).sum()
