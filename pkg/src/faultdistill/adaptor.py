"""Teacher-side permute-MLP feature encoding and the student adaptation head."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ChannelLayerNorm
from .config import ConfigError


def scatter_embeddings(embeddings: torch.Tensor, masks: torch.Tensor,
                       areas: torch.Tensor | None = None) -> torch.Tensor:
    """Paint per-object rows onto a dense (C, H, W) map.

    ``embeddings`` is (N + 1, C) and ``masks`` (N + 1, H, W), the virtual
    object last. The virtual row covers the map; real objects are painted
    largest first so smaller ones end up on top. ``areas`` defaults to the
    mask cell counts; equal areas keep annotation order.
    """
    n = masks.shape[0] - 1
    h, w = masks.shape[-2:]
    owner = torch.full((h, w), n, dtype=torch.long)
    if n:
        if areas is None:
            areas = masks[:n].flatten(1).sum(1)
        keys = [(-float(areas[i]), i) for i in range(n)]
        for _, i in sorted(keys):
            owner[masks[i]] = i
    return embeddings[owner].permute(2, 0, 1)


class PermuteEncoder(nn.Module):
    """FC(X_H + X_W + X_C) over a (B, C, H, W) map.

    Channels are split into ``segments`` groups of width g. The height branch
    folds H into each group's channels and mixes the H*g block with one fully
    connected layer shared over groups and width positions; the width branch
    does the same along W, and the channel branch is a pointwise FC.
    """

    def __init__(self, channels: int, height: int, width: int, segments: int = 4,
                 weighted: bool = False) -> None:
        super().__init__()
        if segments < 1 or channels % segments:
            raise ConfigError(f"segments={segments} must divide channels={channels}")
        self.channels, self.height, self.width, self.segments = channels, height, width, segments
        g = channels // segments
        self.mlp_h = nn.Linear(height * g, height * g)
        self.mlp_w = nn.Linear(width * g, width * g)
        self.mlp_c = nn.Linear(channels, channels)
        self.fc = nn.Linear(channels, channels)
        self.reweight = None
        if weighted:
            hidden = max(1, channels // 4)
            self.reweight = nn.Sequential(
                nn.Linear(channels, hidden), nn.GELU(), nn.Linear(hidden, 3 * channels))

    def branches(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        b, c, h, w = x.shape
        if (c, h, w) != (self.channels, self.height, self.width):
            raise ConfigError(
                f"expected ({self.channels}, {self.height}, {self.width}), got {(c, h, w)}")
        s, g = self.segments, c // self.segments
        t = x.permute(0, 2, 3, 1).reshape(b, h, w, s, g)
        xh = t.permute(0, 3, 2, 1, 4).reshape(b, s, w, h * g)
        xh = self.mlp_h(xh).reshape(b, s, w, h, g).permute(0, 3, 2, 1, 4).reshape(b, h, w, c)
        xw = t.permute(0, 3, 1, 2, 4).reshape(b, s, h, w * g)
        xw = self.mlp_w(xw).reshape(b, s, h, w, g).permute(0, 2, 3, 1, 4).reshape(b, h, w, c)
        xc = self.mlp_c(t.reshape(b, h, w, c))
        return xh, xw, xc

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xh, xw, xc = self.branches(x)
        if self.reweight is None:
            mixed = xh + xw + xc
        else:
            a = self.reweight((xh + xw + xc).mean(dim=(1, 2)))
            a = a.reshape(x.shape[0], self.channels, 3).softmax(dim=-1)
            mixed = (xh * a[:, None, None, :, 0] + xw * a[:, None, None, :, 1]
                     + xc * a[:, None, None, :, 2])
        return self.fc(mixed).permute(0, 3, 1, 2)


def permute_encode(x: torch.Tensor, encoder: PermuteEncoder) -> torch.Tensor:
    if x.dim() == 3:
        return encoder(x[None])[0]
    return encoder(x)


class StudentAdaptor(nn.Module):
    """Residual two-layer 3x3 head; the output conv starts at zero."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm = ChannelLayerNorm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(F.gelu(self.norm(self.conv1(x))))


def adapt_student(level: torch.Tensor, adaptor: StudentAdaptor) -> torch.Tensor:
    if level.dim() == 3:
        return adaptor(level[None])[0]
    return adaptor(level)
