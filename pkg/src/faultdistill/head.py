"""Anchor-free detection head shared by the student and teacher pyramids."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import batched_nms

from .backbone import ChannelLayerNorm
from .config import ConfigError
from .label_encoder import LabelSet

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
CENTER_RADIUS = 1.5
# FCOS-style size ranges, in cells of the level being assigned
RANGE_LOW, RANGE_HIGH = 4.0, 8.0


@dataclass
class Prediction:
    """Per-level raw head outputs for a batch.

    ``cls``: (B, K, H, W) logits; ``box``: (B, 4, H, W) positive distances
    l, t, r, b normalized by image size; ``quality``: (B, 1, H, W) logits.
    """

    cls: list[torch.Tensor]
    box: list[torch.Tensor]
    quality: list[torch.Tensor]

    @property
    def level_shapes(self) -> list[tuple[int, int]]:
        return [tuple(c.shape[-2:]) for c in self.cls]

    def flat(self, i: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Image ``i`` flattened over levels: (L, K), (L, 4), (L,)."""
        cls = torch.cat([c[i].flatten(1).T for c in self.cls])
        box = torch.cat([b[i].flatten(1).T for b in self.box])
        q = torch.cat([q[i].flatten() for q in self.quality])
        return cls, box, q


def _tower(channels: int, depth: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for _ in range(depth):
        layers += [nn.Conv2d(channels, channels, 3, padding=1), ChannelLayerNorm(channels), nn.GELU()]
    return nn.Sequential(*layers)


class DetectionHead(nn.Module):
    def __init__(self, channels: int, num_classes: int, num_levels: int = 4,
                 num_convs: int = 1, prior: float = 0.01) -> None:
        super().__init__()
        self.channels = channels
        self.num_classes = num_classes
        self.cls_tower = _tower(channels, num_convs)
        self.reg_tower = _tower(channels, num_convs)
        self.cls_logits = nn.Conv2d(channels, num_classes, 3, padding=1)
        self.box_pred = nn.Conv2d(channels, 4, 3, padding=1)
        self.quality = nn.Conv2d(channels, 1, 3, padding=1)
        self.log_scales = nn.Parameter(torch.full((num_levels,), math.log(2.0)))
        for conv in (self.cls_logits, self.box_pred, self.quality):
            nn.init.normal_(conv.weight, std=0.01)
            nn.init.zeros_(conv.bias)
        nn.init.constant_(self.cls_logits.bias, -math.log((1 - prior) / prior))

    def forward(self, pyramid: Sequence[torch.Tensor]) -> Prediction:
        cls, box, qual = [], [], []
        for p, x in enumerate(pyramid):
            if x.shape[1] != self.channels:
                raise ConfigError(f"head expects {self.channels} channels, level {p} has {x.shape[1]}")
            h, w = x.shape[-2:]
            c = self.cls_tower(x)
            r = self.reg_tower(x)
            cls.append(self.cls_logits(c))
            d = torch.exp((self.box_pred(r) + self.log_scales[p]).clamp(max=10.0))
            norm = d.new_tensor([1.0 / w, 1.0 / h, 1.0 / w, 1.0 / h])
            box.append(d * norm[None, :, None, None])
            qual.append(self.quality(r))
        return Prediction(cls, box, qual)


def head_forward(pyramid: Sequence[torch.Tensor], head: DetectionHead) -> Prediction:
    return head(pyramid)


def level_locations(shapes: Sequence[tuple[int, int]], dtype=torch.float32):
    """Normalized cell centres (L, 2) and per-location level index / grid size."""
    locs, level, grid = [], [], []
    for p, (h, w) in enumerate(shapes):
        ys = (torch.arange(h, dtype=dtype) + 0.5) / h
        xs = (torch.arange(w, dtype=dtype) + 0.5) / w
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        locs.append(torch.stack([xx.flatten(), yy.flatten()], 1))
        level.append(torch.full((h * w,), p, dtype=torch.long))
        grid.append(torch.tensor([[w, h]], dtype=dtype).expand(h * w, 2))
    return torch.cat(locs), torch.cat(level), torch.cat(grid)


def assign_targets(labels: LabelSet, shapes: Sequence[tuple[int, int]], dtype=torch.float32):
    """FCOS-style assignment with centre sampling.

    Returns (matched object index or -1, (L,)) and the ltrb regression
    targets (L, 4) for the matched object (zeros for negatives).
    """
    locs, level, grid = level_locations(shapes, dtype)
    n_loc = len(locs)
    matched = torch.full((n_loc,), -1, dtype=torch.long)
    targets = torch.zeros(n_loc, 4, dtype=dtype)
    if len(labels) == 0:
        return matched, targets
    b = labels.boxes.to(dtype)
    x, y = locs[:, 0:1], locs[:, 1:2]
    ltrb = torch.stack([x - b[:, 0], y - b[:, 1], b[:, 2] - x, b[:, 3] - y], dim=2)  # (L, N, 4)
    inside = ltrb.min(dim=2).values > 0
    cx, cy = (b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2
    gw, gh = grid[:, 0:1], grid[:, 1:2]
    near = ((x - cx).abs() * gw < CENTER_RADIUS) & ((y - cy).abs() * gh < CENTER_RADIUS)
    cells = torch.maximum(ltrb[..., 0::2].amax(2) * gw, ltrb[..., 1::2].amax(2) * gh)
    last = len(shapes) - 1
    lo_ok = (level[:, None] == 0) | (cells > RANGE_LOW)
    hi_ok = (level[:, None] == last) | (cells <= RANGE_HIGH)
    ok = inside & near & lo_ok & hi_ok
    area = labels.areas().to(dtype)[None].expand(n_loc, -1)
    area = torch.where(ok, area, torch.full_like(area, float("inf")))
    best_area, best = area.min(dim=1)
    pos = torch.isfinite(best_area)
    matched[pos] = best[pos]
    targets[pos] = ltrb[pos, best[pos]]
    return matched, targets


def centerness(ltrb: torch.Tensor) -> torch.Tensor:
    lr = ltrb[:, 0::2]
    tb = ltrb[:, 1::2]
    c = (lr.amin(1) / lr.amax(1)) * (tb.amin(1) / tb.amax(1))
    return c.clamp_min(0).sqrt()


def ltrb_to_boxes(locs: torch.Tensor, ltrb: torch.Tensor) -> torch.Tensor:
    return torch.stack([locs[:, 0] - ltrb[:, 0], locs[:, 1] - ltrb[:, 1],
                        locs[:, 0] + ltrb[:, 2], locs[:, 1] + ltrb[:, 3]], dim=1)


def giou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - GIoU for matched (M, 4) box pairs."""
    area_p = (pred[:, 2] - pred[:, 0]) * (pred[:, 3] - pred[:, 1])
    area_t = (target[:, 2] - target[:, 0]) * (target[:, 3] - target[:, 1])
    iw = (torch.minimum(pred[:, 2], target[:, 2]) - torch.maximum(pred[:, 0], target[:, 0])).clamp_min(0)
    ih = (torch.minimum(pred[:, 3], target[:, 3]) - torch.maximum(pred[:, 1], target[:, 1])).clamp_min(0)
    inter = iw * ih
    union = area_p + area_t - inter
    iou = inter / union
    ew = torch.maximum(pred[:, 2], target[:, 2]) - torch.minimum(pred[:, 0], target[:, 0])
    eh = torch.maximum(pred[:, 3], target[:, 3]) - torch.minimum(pred[:, 1], target[:, 1])
    enclose = ew * eh
    return 1 - (iou - (enclose - union) / enclose)


def focal_loss(logits: torch.Tensor, targets: torch.Tensor,
               alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Summed sigmoid focal loss."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    a_t = alpha * targets + (1 - alpha) * (1 - targets)
    return (a_t * (1 - p_t) ** gamma * ce).sum()


def quality_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross entropy minus the target entropy: zero at the optimum."""
    bce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    entropy = -(torch.xlogy(target, target) + torch.xlogy(1 - target, 1 - target))
    return (bce - entropy).clamp_min(0)


def detection_loss(pred: Prediction, labels: Sequence[LabelSet],
                   return_parts: bool = False):
    """Focal + GIoU + quality loss, normalized by the batch's positive count."""
    shapes = pred.level_shapes
    dtype = pred.cls[0].dtype
    locs, _, _ = level_locations(shapes, dtype)
    cls_sum = box_sum = q_sum = pred.cls[0].new_zeros(())
    num_pos = 0
    for i, lab in enumerate(labels):
        cls, box, q = pred.flat(i)
        matched, tgt = assign_targets(lab, shapes, dtype)
        pos = matched >= 0
        onehot = torch.zeros_like(cls)
        if pos.any():
            onehot[pos, lab.classes[matched[pos]]] = 1.0
            gt_boxes = lab.boxes.to(dtype)[matched[pos]]
            box_sum = box_sum + giou_loss(ltrb_to_boxes(locs[pos], box[pos]), gt_boxes).sum()
            q_sum = q_sum + quality_loss(q[pos], centerness(tgt[pos])).sum()
        cls_sum = cls_sum + focal_loss(cls, onehot)
        num_pos += int(pos.sum())
    norm = max(num_pos, 1)
    parts = {"cls": cls_sum / norm, "box": box_sum / norm, "quality": q_sum / norm}
    total = parts["cls"] + parts["box"] + parts["quality"]
    return (total, parts) if return_parts else total


@dataclass
class Detections:
    boxes: torch.Tensor  # (D, 4) normalized x1, y1, x2, y2
    scores: torch.Tensor
    classes: torch.Tensor


def decode(pred: Prediction, score_thresh: float = 0.05, nms_iou: float = 0.6,
           max_det: int = 100, pre_nms: int = 1000) -> list[Detections]:
    shapes = pred.level_shapes
    locs, _, _ = level_locations(shapes, pred.cls[0].dtype)
    out = []
    for i in range(pred.cls[0].shape[0]):
        cls, box, q = pred.flat(i)
        scores = torch.sqrt(torch.sigmoid(cls) * torch.sigmoid(q)[:, None])
        flat = scores.flatten()
        keep = (flat > score_thresh).nonzero().flatten()
        if len(keep) > pre_nms:
            keep = keep[flat[keep].topk(pre_nms).indices]
        loc_idx, cls_idx = keep // cls.shape[1], keep % cls.shape[1]
        boxes = ltrb_to_boxes(locs[loc_idx], box[loc_idx]).clamp(0, 1)
        sc = flat[keep]
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, sc, cls_idx = boxes[valid], sc[valid], cls_idx[valid]
        k = batched_nms(boxes.float(), sc.float(), cls_idx, nms_iou)[:max_det]
        out.append(Detections(boxes[k].detach(), sc[k].detach(), cls_idx[k]))
    return out
