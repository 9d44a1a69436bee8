"""Grid-based locator: multi-scale grid classification plus in-cell offset regression.

A location ``u`` in [-1, 1]^2 at grid scale ``L`` falls in cell
``z = (zx, zy)`` with flat label ``zy * L + zx`` (left-to-right, top-to-bottom)
and an offset in [-1, 1]^2 measured from the cell centre.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class GridError(ValueError):
    pass


def encode_grid_target(u: torch.Tensor, scale: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Grid labels ``(...)`` (int64) and offsets ``(..., 2)`` for locations ``u`` ``(..., 2)``."""
    u = torch.as_tensor(u, dtype=torch.float64)
    if torch.any(u.abs() > 1.0):
        raise GridError("grid targets need coordinates in [-1, 1]")
    t = (u / 2 + 0.5) * scale
    # floor(clamp(t, 0, L - eps)) without float round-off at the far border
    z = torch.floor(t).clamp(0, scale - 1)
    label = (z[..., 1] * scale + z[..., 0]).long()
    offset = (2 * (t - z - 0.5)).clamp(-1.0, 1.0)
    return label, offset


def decode_grid(label: torch.Tensor, offset: torch.Tensor, scale: int) -> torch.Tensor:
    label = torch.as_tensor(label)
    if torch.any(label < 0) or torch.any(label >= scale * scale):
        raise GridError(f"grid label out of range for scale {scale}")
    offset = torch.as_tensor(offset)
    z = torch.stack([label % scale, torch.div(label, scale, rounding_mode="floor")], dim=-1).to(offset.dtype)
    t = z + 0.5 + offset / 2
    return 2 * t / scale - 1


class GridLocator(nn.Module):
    """One linear classifier head and one linear offset head per grid scale."""

    def __init__(self, in_dim: int, scales: list[int]):
        super().__init__()
        self.scales = [int(s) for s in scales]
        self.classifiers = nn.ModuleList(nn.Linear(in_dim, s * s) for s in self.scales)
        self.regressors = nn.ModuleList(nn.Linear(in_dim, 2) for _ in self.scales)

    def _check(self, scale_index: int) -> None:
        if not 0 <= scale_index < len(self.scales):
            raise GridError(f"no head for scale index {scale_index} (have {len(self.scales)})")

    def logits(self, psi: torch.Tensor, scale_index: int) -> torch.Tensor:
        self._check(scale_index)
        return self.classifiers[scale_index](psi)

    def classify_grid(self, psi: torch.Tensor, scale_index: int) -> torch.Tensor:
        return torch.softmax(self.logits(psi, scale_index), dim=-1)

    def regress_offset(self, psi: torch.Tensor, scale_index: int) -> torch.Tensor:
        self._check(scale_index)
        return self.regressors[scale_index](psi)

    def predict_keypoint(
        self, psi: torch.Tensor, gt_labels: list[torch.Tensor] | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Mean of the per-scale decoded points.

        Returns ``(..., 2)`` predictions and the ``(S, ..., 2)`` per-scale points.
        Inference takes the argmax cell; pass ``gt_labels`` to decode training-style.
        """
        points = []
        for i, scale in enumerate(self.scales):
            if gt_labels is None:
                label = self.logits(psi, i).argmax(dim=-1)
            else:
                label = gt_labels[i]
            offset = self.regress_offset(psi, i).clamp(-1.0, 1.0)
            points.append(decode_grid(label, offset, scale))
        per_scale = torch.stack(points)
        return per_scale.mean(dim=0), per_scale


def classification_loss(probs: torch.Tensor, gt_label: torch.Tensor | int) -> torch.Tensor:
    """``-log p[gt]`` for a probability vector ``(..., C)``; summed over leading dims."""
    gt = torch.as_tensor(gt_label, device=probs.device)
    if torch.any(gt < 0) or torch.any(gt >= probs.shape[-1]):
        raise GridError(f"label out of range for {probs.shape[-1]} cells")
    picked = probs.gather(-1, gt.long().unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked).sum()


def classification_loss_from_logits(logits: torch.Tensor, gt_label: torch.Tensor) -> torch.Tensor:
    # numerically stable equivalent of classification_loss(softmax(logits), gt), per element
    return F.cross_entropy(logits, gt_label, reduction="none")


def offset_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """L1 distance over the last (x, y) axis, per element."""
    return (pred - gt).abs().sum(dim=-1)
