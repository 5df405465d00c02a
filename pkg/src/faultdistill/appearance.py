"""Object masks and mask-pooled appearance embeddings."""
from __future__ import annotations

import logging
from typing import Sequence

import torch
from torch import nn

from .label_encoder import LabelSet

log = logging.getLogger(__name__)


def rasterize_masks(labels: LabelSet, level_shapes: Sequence[tuple[int, int]]) -> list[torch.Tensor]:
    """Per level, a bool tensor (N + 1, H_p, W_p); the last row is the virtual object.

    A cell belongs to a box when its centre lies inside the box (edges
    included). A box too small to contain any centre gets the single cell
    holding the box centre.
    """
    boxes = labels.boxes.double()
    out = []
    for h, w in level_shapes:
        cy = (torch.arange(h, dtype=torch.float64) + 0.5) / h
        cx = (torch.arange(w, dtype=torch.float64) + 0.5) / w
        inside_x = (cx[None] >= boxes[:, 0:1]) & (cx[None] <= boxes[:, 2:3])
        inside_y = (cy[None] >= boxes[:, 1:2]) & (cy[None] <= boxes[:, 3:4])
        masks = inside_y[:, :, None] & inside_x[:, None, :]
        for i in (~masks.flatten(1).any(1)).nonzero().flatten().tolist():
            b = boxes[i]
            r = min(max(int(float((b[1] + b[3]) / 2) * h), 0), h - 1)
            c = min(max(int(float((b[0] + b[2]) / 2) * w), 0), w - 1)
            log.debug("box %d %s is empty at %dx%d; using cell (%d, %d)", i, b.tolist(), h, w, r, c)
            masks[i, r, c] = True
        virtual = torch.ones(1, h, w, dtype=torch.bool)
        out.append(torch.cat([masks, virtual], dim=0))
    return out


def masked_mean_pool(features: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """(C, H, W) features, (M, H, W) masks -> (M, C): sum over the mask / mask area."""
    m = masks.to(features.dtype)
    area = m.sum(dim=(1, 2)).clamp_min(1.0)
    return torch.einsum("mhw,chw->mc", m, features) / area[:, None]


class AppearanceEncoder(nn.Module):
    """A 1x1 projection followed by size-normalized mask pooling."""

    def __init__(self, channels: int = 64) -> None:
        super().__init__()
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, level: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        return masked_mean_pool(self.proj(level[None])[0], masks)


def appearance_embed(level: torch.Tensor, masks: torch.Tensor,
                     encoder: AppearanceEncoder) -> torch.Tensor:
    return encoder(level, masks)
