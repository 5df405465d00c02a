"""FaultMLP: an axial-shift MLP backbone with a configurable feature pyramid."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError

STRIDES = (4, 8, 16, 32)


class InputShapeError(ValueError):
    pass


@dataclass(frozen=True)
class AxialShiftConfig:
    channels: int
    shift_size: int = 5
    dilation: int = 1

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.shift_size < 1 or self.shift_size % 2 == 0:
            raise ConfigError(f"shift_size must be a positive odd integer, got {self.shift_size}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")


@dataclass(frozen=True)
class StageConfig:
    patch_merge: int
    dim: int
    depth: int = 2
    shift: AxialShiftConfig | None = None
    # "head 12"/"head 24" from the reference table; recorded but shape-neutral.
    heads: int | None = None


def table1_stages(shift_size: int = 5, dilation: int = 1,
                  dims: Sequence[int] = (64, 128, 256, 512),
                  depths: Sequence[int] = (2, 2, 2, 2)) -> list[StageConfig]:
    heads = (None, None, 12, 24)
    return [
        StageConfig(patch_merge=4 if i == 0 else 2, dim=d, depth=n,
                    shift=AxialShiftConfig(d, shift_size, dilation), heads=heads[i])
        for i, (d, n) in enumerate(zip(dims, depths))
    ]


def shift_offsets(channels: int, shift_size: int, dilation: int = 1) -> list[int]:
    """Per-channel displacement: channel c reads from ``index + offset[c]``."""
    group = math.ceil(channels / shift_size)
    return [(c // group - shift_size // 2) * dilation for c in range(channels)]


def _shift_groups(channels: int, shift_size: int, dilation: int) -> list[tuple[int, int, int]]:
    offsets = shift_offsets(channels, shift_size, dilation)
    groups = []
    start = 0
    for c in range(1, channels + 1):
        if c == channels or offsets[c] != offsets[start]:
            groups.append((start, c, offsets[start]))
            start = c
    return groups


def _displace(x: torch.Tensor, offset: int, dim: int) -> torch.Tensor:
    """out[..., i, ...] = x[..., i + offset, ...] along ``dim``; zeros outside."""
    if offset == 0:
        return x
    n = x.shape[dim]
    if abs(offset) >= n:
        return torch.zeros_like(x)
    if offset > 0:
        kept = x.narrow(dim, offset, n - offset)
        pad_shape = list(x.shape)
        pad_shape[dim] = offset
        return torch.cat([kept, x.new_zeros(pad_shape)], dim=dim)
    kept = x.narrow(dim, 0, n + offset)
    pad_shape = list(x.shape)
    pad_shape[dim] = -offset
    return torch.cat([x.new_zeros(pad_shape), kept], dim=dim)


def shift_only(x: torch.Tensor, shift_size: int, dilation: int = 1,
               direction: str = "horizontal") -> torch.Tensor:
    """Grouped channel displacement without the channel projection."""
    if direction not in ("horizontal", "vertical"):
        raise ValueError(f"direction must be 'horizontal' or 'vertical', got {direction!r}")
    dim = x.dim() - 1 if direction == "horizontal" else x.dim() - 2
    cdim = x.dim() - 3
    parts = [
        _displace(x.narrow(cdim, lo, hi - lo), off, dim)
        for lo, hi, off in _shift_groups(x.shape[cdim], shift_size, dilation)
    ]
    return torch.cat(parts, dim=cdim)


def axial_shift(x: torch.Tensor, weight: torch.Tensor, cfg: AxialShiftConfig,
                direction: str = "horizontal") -> torch.Tensor:
    """Shift channel groups along one axis, then mix channels pointwise.

    ``x`` is (C, H, W) or (B, C, H, W); ``weight`` is (C_out, C). Horizontal
    shifts move along the width axis, vertical along the height axis.
    """
    if x.shape[-3] != cfg.channels or weight.shape[-1] != cfg.channels:
        raise ConfigError(
            f"channel mismatch: input has {x.shape[-3]}, config {cfg.channels}, "
            f"projection expects {weight.shape[-1]}")
    shifted = shift_only(x, cfg.shift_size, cfg.dilation, direction)
    return torch.einsum("oc,...chw->...ohw", weight, shifted)


class ChannelLayerNorm(nn.LayerNorm):
    """LayerNorm over the channel axis of a (B, C, H, W) map."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(x.movedim(-3, -1)).movedim(-1, -3)


class AxialShift(nn.Module):
    def __init__(self, cfg: AxialShiftConfig) -> None:
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.weight_h = nn.Parameter(torch.empty(c, c))
        self.weight_v = nn.Parameter(torch.empty(c, c))
        self.bias = nn.Parameter(torch.zeros(c))
        nn.init.trunc_normal_(self.weight_h, std=0.02)
        nn.init.trunc_normal_(self.weight_v, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = axial_shift(x, self.weight_h, self.cfg, "horizontal")
        y = y + axial_shift(x, self.weight_v, self.cfg, "vertical")
        return y + self.bias[:, None, None]


class MLPBlock(nn.Module):
    """x + MLP(GELU(AxialShift(LN(x)))) with a pointwise two-layer MLP."""

    def __init__(self, cfg: AxialShiftConfig, mlp_ratio: float = 4.0) -> None:
        super().__init__()
        c = cfg.channels
        hidden = max(1, int(c * mlp_ratio))
        self.norm = ChannelLayerNorm(c)
        self.shift = AxialShift(cfg)
        self.fc1 = nn.Conv2d(c, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, c, 1)
        for conv in (self.fc1, self.fc2):
            nn.init.trunc_normal_(conv.weight, std=0.02)
            nn.init.zeros_(conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.gelu(self.shift(self.norm(x)))
        y = self.fc2(F.gelu(self.fc1(y)))
        return x + y

    def zero_path_(self) -> None:
        with torch.no_grad():
            for p in (self.shift.weight_h, self.shift.weight_v, self.shift.bias,
                      self.fc2.weight, self.fc2.bias):
                p.zero_()


def mlp_block(x: torch.Tensor, block: MLPBlock) -> torch.Tensor:
    return block(x)


class PatchMerge(nn.Module):
    """Concatenate n x n neighbours, project linearly, then LayerNorm."""

    def __init__(self, in_ch: int, out_ch: int, factor: int) -> None:
        super().__init__()
        self.factor = factor
        self.proj = nn.Conv2d(in_ch * factor * factor, out_ch, 1)
        self.norm = ChannelLayerNorm(out_ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(self.proj(F.pixel_unshuffle(x, self.factor)))


class FaultMLP(nn.Module):
    def __init__(self, stages: Sequence[StageConfig], in_ch: int = 3,
                 mlp_ratio: float = 4.0) -> None:
        super().__init__()
        if len(stages) != 4:
            raise ConfigError(f"FaultMLP has 4 stages, got {len(stages)}")
        self.stage_cfgs = list(stages)
        self.stages = nn.ModuleList()
        prev = in_ch
        for st in stages:
            shift = st.shift or AxialShiftConfig(st.dim)
            if shift.channels != st.dim:
                raise ConfigError(f"stage dim {st.dim} != shift channels {shift.channels}")
            self.stages.append(nn.Sequential(
                PatchMerge(prev, st.dim, st.patch_merge),
                *[MLPBlock(shift, mlp_ratio) for _ in range(st.depth)],
            ))
            prev = st.dim
        self.out_dims = [st.dim for st in stages]
        self.total_stride = math.prod(st.patch_merge for st in stages)

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        h, w = img.shape[-2:]
        if h % self.total_stride or w % self.total_stride:
            raise InputShapeError(
                f"image size {h}x{w} must be divisible by {self.total_stride}")
        x = img
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def backbone_forward(img: torch.Tensor, backbone: FaultMLP) -> list[torch.Tensor]:
    """Run the backbone on a single (3, H, W) image or a batch."""
    if img.dim() == 3:
        return [f[0] for f in backbone(img[None])]
    return backbone(img)


class FPN(nn.Module):
    """Top-down lateral-fusion pyramid with nearest-neighbour upsampling."""

    def __init__(self, in_dims: Sequence[int], channels: int = 64) -> None:
        super().__init__()
        if channels <= 0:
            raise ConfigError(f"pyramid channels must be > 0, got {channels}")
        self.channels = channels
        self.lateral = nn.ModuleList(nn.Conv2d(d, channels, 1) for d in in_dims)
        self.output = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in in_dims)

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        lat = [conv(f) for conv, f in zip(self.lateral, feats)]
        for i in range(len(lat) - 2, -1, -1):
            lat[i] = lat[i] + F.interpolate(lat[i + 1], size=lat[i].shape[-2:], mode="nearest")
        return [conv(x) for conv, x in zip(self.output, lat)]


def fpn_forward(stage_feats: Sequence[torch.Tensor], fpn: FPN) -> list[torch.Tensor]:
    return fpn(stage_feats)


class StudentDetectorBody(nn.Module):
    """Backbone plus pyramid neck: image -> list of 4 pyramid levels."""

    def __init__(self, stages: Sequence[StageConfig], fpn_channels: int = 64,
                 mlp_ratio: float = 4.0) -> None:
        super().__init__()
        self.backbone = FaultMLP(stages, mlp_ratio=mlp_ratio)
        self.fpn = FPN(self.backbone.out_dims, fpn_channels)

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        return self.fpn(self.backbone(img))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
