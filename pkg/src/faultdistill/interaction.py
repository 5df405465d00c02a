"""Cross attention from appearance queries to label keys/values."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import ConfigError


@dataclass(frozen=True)
class AttentionConfig:
    channels: int = 64
    heads: int = 4

    def __post_init__(self) -> None:
        if self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"heads={self.heads} must divide channels={self.channels}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)


def stable_softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = logits - logits.amax(dim=dim, keepdim=True).detach()
    e = z.exp()
    return e / e.sum(dim=dim, keepdim=True)


class InteractionEncoder(nn.Module):
    """Multi-head attention: appearance rows attend over label rows.

    An image without objects attends to a single learned null label.
    """

    def __init__(self, cfg: AttentionConfig) -> None:
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.q = nn.Linear(c, c)
        self.k = nn.Linear(c, c)
        self.v = nn.Linear(c, c)
        self.out = nn.Linear(c, c)
        self.null_label = nn.Parameter(torch.zeros(1, c))
        nn.init.normal_(self.null_label, std=0.02)

    def attention(self, appearance: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Per-head weights, shape (heads, M, N)."""
        cfg = self.cfg
        if appearance.shape[-1] != cfg.channels or labels.shape[-1] != cfg.channels:
            raise ConfigError(
                f"expected width {cfg.channels}, got queries {appearance.shape[-1]} "
                f"and labels {labels.shape[-1]}")
        if len(labels) == 0:
            labels = self.null_label
        q = self.q(appearance).view(-1, cfg.heads, cfg.head_dim).transpose(0, 1)
        k = self.k(labels).view(-1, cfg.heads, cfg.head_dim).transpose(0, 1)
        return stable_softmax(q @ k.transpose(1, 2) * cfg.scale, dim=-1)

    def forward(self, appearance: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        attn = self.attention(appearance, labels)
        if len(labels) == 0:
            labels = self.null_label
        v = self.v(labels).view(-1, cfg.heads, cfg.head_dim).transpose(0, 1)
        u = (attn @ v).transpose(0, 1).reshape(len(appearance), cfg.channels)
        return self.out(u)


def interact(appearance: torch.Tensor, label_emb: torch.Tensor,
             encoder: InteractionEncoder) -> torch.Tensor:
    return encoder(appearance, label_emb)
