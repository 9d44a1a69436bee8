"""Random shift, scale and rotation jitter for training episodes, plus optional colour jitter for photos.

One jitter per image, shared by its edgemap style variants so that support
coordinates stay aligned across S, S1 and S2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .episodes import IMAGENET_MEAN, IMAGENET_STD


@dataclass(frozen=True)
class Jitter:
    scale: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)
    angle: float = 0.0  # radians, about the image centre
    # colour: channel permutation and per-channel inversion, applied in [0, 1] RGB space
    perm: tuple[int, int, int] = (0, 1, 2)
    invert: tuple[bool, bool, bool] = (False, False, False)

    @property
    def is_identity(self) -> bool:
        return not self.moves and not self.recolors

    @property
    def moves(self) -> bool:
        return self.scale != 1.0 or self.shift != (0.0, 0.0) or self.angle != 0.0

    @property
    def recolors(self) -> bool:
        return self.perm != (0, 1, 2) or any(self.invert)

    def geometric(self) -> "Jitter":
        """Same geometry, colours untouched; used for edgemaps and sketches."""
        return replace(self, perm=(0, 1, 2), invert=(False, False, False))

    def points(self, coords: torch.Tensor, vis: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Map normalized ``(..., 2)`` coordinates; points pushed off the image become invisible."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        rot = coords.new_tensor([[c, -s], [s, c]])
        out = self.scale * coords @ rot.T + coords.new_tensor(self.shift)
        inside = (out.abs() <= 1.0).all(dim=-1)
        return out, vis * inside.to(vis.dtype)

    def images(self, batch: torch.Tensor) -> torch.Tensor:
        if self.is_identity:
            return batch
        if self.recolors:
            mean = batch.new_tensor(IMAGENET_MEAN)[:, None, None]
            std = batch.new_tensor(IMAGENET_STD)[:, None, None]
            rgb = (batch * std + mean)[:, list(self.perm)]
            flip = batch.new_tensor(self.invert)[:, None, None]
            rgb = flip * (1.0 - rgb) + (1.0 - flip) * rgb
            batch = (rgb - mean) / std
        if not self.moves:
            return batch
        c, s = math.cos(self.angle), math.sin(self.angle)
        # output location p samples the input at R^T (p - t) / scale
        inv = batch.new_tensor([[c, s], [-s, c]]) / self.scale
        shift = -inv @ batch.new_tensor(self.shift)
        theta = torch.cat([inv, shift[:, None]], dim=1).expand(len(batch), 2, 3)
        grid = F.affine_grid(theta, list(batch.shape), align_corners=False)
        return F.grid_sample(batch, grid, mode="bilinear", padding_mode="border", align_corners=False)


def sample_jitter(
    rng: np.random.Generator, scale: float, shift: float, color: bool = False, rotate: float = 0.0
) -> Jitter:
    """``rotate`` is the maximum rotation in degrees."""
    s = 1.0 + rng.uniform(-scale, scale) if scale > 0 else 1.0
    tx, ty = rng.uniform(-shift, shift, 2) if shift > 0 else (0.0, 0.0)
    angle = math.radians(rng.uniform(-rotate, rotate)) if rotate > 0 else 0.0
    perm, invert = (0, 1, 2), (False, False, False)
    if color:
        perm = tuple(int(i) for i in rng.permutation(3))
        invert = tuple(bool(b) for b in rng.random(3) < 0.5)
    return Jitter(float(s), (float(tx), float(ty)), float(angle), perm, invert)
