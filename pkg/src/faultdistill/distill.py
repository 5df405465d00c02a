"""Student detector, dynamic teacher, and the joint distillation objective."""
from __future__ import annotations

import contextlib
from collections import Counter
from typing import Callable, Sequence

import torch
from torch import nn

from .adaptor import PermuteEncoder, StudentAdaptor, scatter_embeddings
from .appearance import AppearanceEncoder, rasterize_masks
from .backbone import STRIDES, StudentDetectorBody, count_parameters, table1_stages
from .config import ConfigError, DistillConfig
from .head import Detections, DetectionHead, decode, detection_loss
from .interaction import AttentionConfig, InteractionEncoder
from .label_encoder import LabelEncoder, LabelSet, label_descriptors


class DynamicTeacher(nn.Module):
    """Labels + student pyramid -> instructive teacher features, one map per level."""

    def __init__(self, cfg: DistillConfig, level_shapes: Sequence[tuple[int, int]]) -> None:
        super().__init__()
        c = cfg.fpn_channels
        self.num_classes = cfg.num_classes
        self.level_shapes = [tuple(s) for s in level_shapes]
        self.label_encoder = LabelEncoder(cfg.num_classes, c)
        self.appearance = AppearanceEncoder(c)
        self.interaction = InteractionEncoder(AttentionConfig(c, cfg.attn_heads))
        self.permute = nn.ModuleList(
            PermuteEncoder(c, h, w, cfg.segments, cfg.weighted_aggregation)
            for h, w in self.level_shapes)

    def dense_embeddings(self, pyramid: Sequence[torch.Tensor],
                         labels: Sequence[LabelSet]) -> list[torch.Tensor]:
        """Scattered interaction embeddings per level, (B, C, H_p, W_p)."""
        shapes = [tuple(p.shape[-2:]) for p in pyramid]
        if shapes != self.level_shapes:
            raise ConfigError(f"teacher built for levels {self.level_shapes}, got {shapes}")
        per_level: list[list[torch.Tensor]] = [[] for _ in pyramid]
        dtype = pyramid[0].dtype
        for b, lab in enumerate(labels):
            lab_emb = self.label_encoder(label_descriptors(lab, self.num_classes).to(dtype))
            masks = rasterize_masks(lab, shapes)
            for p, level in enumerate(pyramid):
                a = self.appearance(level[b], masks[p])
                e = self.interaction(a, lab_emb)
                per_level[p].append(scatter_embeddings(e, masks[p]))
        return [torch.stack(maps) for maps in per_level]

    def forward(self, pyramid: Sequence[torch.Tensor], labels: Sequence[LabelSet]) -> list[torch.Tensor]:
        dense = self.dense_embeddings(pyramid, labels)
        return [enc(x) for enc, x in zip(self.permute, dense)]


class DistillDetector(nn.Module):
    """Student (backbone, pyramid, shared head, adaptors) plus the dynamic teacher."""

    def __init__(self, cfg: DistillConfig) -> None:
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        stages = table1_stages(cfg.shift_size, cfg.dilation, cfg.dims, cfg.depths)
        self.student = StudentDetectorBody(stages, cfg.fpn_channels, cfg.mlp_ratio)
        self.head = DetectionHead(cfg.fpn_channels, cfg.num_classes, len(STRIDES), cfg.head_convs)
        self.level_shapes = [(cfg.image_size // s, cfg.image_size // s) for s in STRIDES]
        if cfg.use_teacher:
            self.teacher = DynamicTeacher(cfg, self.level_shapes)
            self.adaptors = nn.ModuleList(StudentAdaptor(cfg.fpn_channels) for _ in STRIDES)
        else:
            self.teacher = None
            self.adaptors = None

    def inference_parameters(self) -> int:
        return count_parameters(self.student) + count_parameters(self.head)

    def teacher_modules(self) -> list[nn.Module]:
        mods: list[nn.Module] = []
        if self.teacher is not None:
            mods += list(self.teacher.modules())
        if self.adaptors is not None:
            mods += list(self.adaptors.modules())
        return mods


def distill_loss(teacher: Sequence[torch.Tensor] | torch.Tensor,
                 student: Sequence[torch.Tensor] | torch.Tensor,
                 tau: float = 15.0, tau_squared: bool = True,
                 domain: str = "flat") -> torch.Tensor:
    """Temperature-softened KL(teacher || student), averaged over levels.

    Each level is (B, ...) and is softmaxed over everything after the batch
    axis (``domain="flat"``) or over spatial positions per channel
    (``domain="channel"``, maps must be (B, C, H, W)). Teacher maps are
    detached: this term only trains the student side.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    if isinstance(teacher, torch.Tensor):
        teacher, student = [teacher], [student]
    if len(teacher) != len(student):
        raise ConfigError("teacher and student must have the same number of levels")
    total = student[0].new_zeros(())
    for t, s in zip(teacher, student):
        if t.shape != s.shape:
            raise ConfigError(f"shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
        t = t.detach()
        if domain == "flat":
            t, s = t.reshape(t.shape[0], -1), s.reshape(s.shape[0], -1)
        elif domain == "channel":
            t, s = t.flatten(2).flatten(0, 1), s.flatten(2).flatten(0, 1)
        else:
            raise ConfigError(f"unknown softmax domain {domain!r}")
        log_pt = torch.log_softmax(t / tau, dim=-1)
        log_ps = torch.log_softmax(s / tau, dim=-1)
        kl = (log_pt.exp() * (log_pt - log_ps)).sum(-1).mean()
        total = total + kl
    loss = total / len(teacher)
    return loss * tau * tau if tau_squared else loss


def total_loss(model: DistillDetector, images: torch.Tensor,
               labels: Sequence[LabelSet]) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """L_det^S + L_det^T + lambda * L_distill and its components."""
    cfg = model.cfg
    pyramid = model.student(images)
    det_s = detection_loss(model.head(pyramid), labels)
    zero = det_s.new_zeros(())
    det_t = distill = zero
    if model.teacher is not None:
        teacher_in = [p.detach() for p in pyramid] if cfg.detach_teacher_input else pyramid
        teacher_feats = model.teacher(teacher_in, labels)
        det_t = detection_loss(model.head(teacher_feats), labels)
        if cfg.lam > 0:
            adapted = [a(x) for a, x in zip(model.adaptors, pyramid)]
            distill = distill_loss(teacher_feats, adapted, cfg.tau, cfg.tau_squared,
                                   cfg.softmax_domain)
    total = det_s + det_t + cfg.lam * distill
    return total, {"det_s": det_s, "det_t": det_t, "distill": distill, "total": total}


@torch.no_grad()
def infer(model: DistillDetector, images: torch.Tensor, score_thresh: float = 0.05,
          nms_iou: float = 0.6, max_det: int = 100) -> list[Detections]:
    """Student-only detection: backbone -> pyramid -> shared head -> decode + NMS."""
    was_training = model.training
    model.eval()
    if images.dim() == 3:
        images = images[None]
    try:
        pred = model.head(model.student(images))
        return decode(pred, score_thresh, nms_iou, max_det)
    finally:
        model.train(was_training)


@contextlib.contextmanager
def count_calls(modules: Sequence[nn.Module]):
    """Count forward invocations per module class while the context is open."""
    counts: Counter = Counter()
    handles = [
        m.register_forward_pre_hook(lambda mod, args, _n=type(m).__name__: counts.update([_n]))
        for m in modules
    ]
    try:
        yield counts
    finally:
        for h in handles:
            h.remove()


def peak_memory_bytes(fn: Callable[[], object]) -> int:
    """Peak of net CPU allocations made while ``fn`` runs."""
    from torch.profiler import ProfilerActivity, profile

    with profile(activities=[ProfilerActivity.CPU], profile_memory=True) as prof:
        fn()
    events = sorted(prof.events(), key=lambda e: e.time_range.start)
    current = peak = 0
    for e in events:
        current += e.self_cpu_memory_usage
        peak = max(peak, current)
    return peak
