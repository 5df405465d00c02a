"""Ground-truth label descriptors and their encoder."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class AnnotationError(ValueError):
    pass


@dataclass
class LabelSet:
    """Normalized boxes (N, 4) as x1, y1, x2, y2 in [0, 1] and class ids (N,)."""

    boxes: torch.Tensor
    classes: torch.Tensor

    def __post_init__(self) -> None:
        boxes = self.boxes
        if not isinstance(boxes, torch.Tensor):
            boxes = torch.tensor(boxes, dtype=torch.float64)
        elif not boxes.is_floating_point():
            boxes = boxes.to(torch.float64)
        self.boxes = boxes.reshape(-1, 4)
        self.classes = torch.as_tensor(self.classes, dtype=torch.long).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise AnnotationError(
                f"{len(self.boxes)} boxes but {len(self.classes)} class ids")

    def __len__(self) -> int:
        return len(self.classes)

    def validate(self, num_classes: int | None = None) -> None:
        b = self.boxes
        if len(b) == 0:
            return
        bad = (b[:, 0] >= b[:, 2]) | (b[:, 1] >= b[:, 3]) | (b < 0).any(1) | (b > 1).any(1)
        if bad.any():
            i = int(bad.nonzero()[0])
            raise AnnotationError(f"object {i}: malformed box {b[i].tolist()}")
        if num_classes is not None and ((self.classes < 0) | (self.classes >= num_classes)).any():
            raise AnnotationError(f"class ids must lie in [0, {num_classes - 1}]")

    def to(self, dtype: torch.dtype) -> "LabelSet":
        return LabelSet(self.boxes.to(dtype), self.classes)

    def permute(self, order) -> "LabelSet":
        order = torch.as_tensor(order, dtype=torch.long)
        return LabelSet(self.boxes[order], self.classes[order])

    def areas(self) -> torch.Tensor:
        b = self.boxes
        return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


def label_descriptors(labels: LabelSet, num_classes: int) -> torch.Tensor:
    """Concatenate box coordinates with a one-hot class: (N, 4 + K)."""
    labels.validate(num_classes)
    onehot = F.one_hot(labels.classes, num_classes).to(labels.boxes.dtype)
    return torch.cat([labels.boxes, onehot], dim=1)


class LabelEncoder(nn.Module):
    """Shared pointwise MLP with input- and feature-level alignment matrices.

    Both alignment matrices start at the identity, so at initialization the
    encoder is a plain per-object MLP. All normalization is LayerNorm, so an
    object's embedding never depends on the rest of the batch.
    """

    def __init__(self, num_classes: int, channels: int = 64) -> None:
        super().__init__()
        self.num_classes = num_classes
        in_dim = 4 + num_classes
        self.align_in = nn.Parameter(torch.eye(in_dim))
        self.embed = nn.Linear(in_dim, channels)
        self.norm1 = nn.LayerNorm(channels)
        self.align_feat = nn.Parameter(torch.eye(channels))
        self.proj = nn.Linear(channels, channels)
        self.norm2 = nn.LayerNorm(channels)

    def forward(self, desc: torch.Tensor) -> torch.Tensor:
        # Rows go through one at a time: batched GEMM kernels may round a row
        # differently depending on its position, which would break exact
        # permutation equivariance. Label sets are small.
        if len(desc) == 0:
            return desc.new_zeros(0, self.proj.out_features)
        return torch.cat([self._encode(row) for row in desc.split(1)])

    def _encode(self, desc: torch.Tensor) -> torch.Tensor:
        x = desc @ self.align_in
        h = F.gelu(self.norm1(self.embed(x)))
        h = h @ self.align_feat
        return self.norm2(self.proj(h))


def encode_labels(labels: LabelSet, encoder: LabelEncoder) -> torch.Tensor:
    desc = label_descriptors(labels, encoder.num_classes).to(encoder.embed.weight.dtype)
    return encoder(desc)
