"""COCO-protocol box evaluation (AP over IoU 0.50:0.95, AR at 1 and 10)."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


@dataclass(frozen=True)
class DetRecord:
    image_id: int
    class_id: int
    box: tuple[float, float, float, float]
    score: float


@dataclass(frozen=True)
class GTRecord:
    image_id: int
    class_id: int
    box: tuple[float, float, float, float]


@dataclass
class EvalResult:
    mAP: float
    AP50: float
    AP75: float
    AR1: float
    AR10: float
    skipped: int = 0
    per_class: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _valid_box(box) -> bool:
    if len(box) != 4 or not all(math.isfinite(v) for v in box):
        return False
    return box[2] > box[0] and box[3] > box[1]


def _match(dets: list[DetRecord], gts: list[GTRecord], thr: float) -> list[bool]:
    """Greedy score-ordered matching of one image's dets (already sorted)."""
    if not dets:
        return []
    if not gts:
        return [False] * len(dets)
    ious = box_iou(np.array([d.box for d in dets]), np.array([g.box for g in gts]))
    taken = np.zeros(len(gts), dtype=bool)
    flags = []
    for i in range(len(dets)):
        cand = np.where(~taken & (ious[i] >= thr), ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= 0:
            taken[j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _average_precision(scored: list[tuple], n_gt: int) -> float:
    """101-point interpolated AP from (sort key, is_tp) pairs."""
    if not scored:
        return 0.0
    scored = sorted(scored, key=lambda t: t[0])
    tp = np.cumsum([s[1] for s in scored], dtype=np.float64)
    fp = np.cumsum([not s[1] for s in scored], dtype=np.float64)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def evaluate(detections: Iterable[DetRecord], ground_truth: Iterable[GTRecord]) -> EvalResult:
    """Evaluate detections against ground truth.

    Detections with malformed boxes are dropped and counted in ``skipped``.
    Ties in score are broken by image id, then lexicographic box, so the
    result does not depend on input order.
    """
    gts_by = defaultdict(list)
    classes = set()
    for g in ground_truth:
        gts_by[(g.image_id, g.class_id)].append(g)
        classes.add(g.class_id)
    dets_by = defaultdict(list)
    skipped = 0
    for d in detections:
        if not _valid_box(d.box) or not math.isfinite(d.score):
            skipped += 1
            continue
        dets_by[(d.image_id, d.class_id)].append(d)
    for key in dets_by:
        dets_by[key].sort(key=lambda d: (-d.score, tuple(d.box)))
        dets_by[key] = dets_by[key][:MAX_DETS]
    for key in gts_by:
        gts_by[key].sort(key=lambda g: tuple(g.box))

    if not classes:
        return EvalResult(0.0, 0.0, 0.0, 0.0, 0.0, skipped=skipped)

    ap = np.zeros((len(IOU_THRESHOLDS), len(classes)))
    ar1 = np.zeros_like(ap)
    ar10 = np.zeros_like(ap)
    class_list = sorted(classes)
    for ci, c in enumerate(class_list):
        images = sorted({k[0] for k in gts_by if k[1] == c} | {k[0] for k in dets_by if k[1] == c})
        n_gt = sum(len(gts_by[(im, c)]) for im in images)
        for ti, thr in enumerate(IOU_THRESHOLDS):
            scored = []
            hits1 = hits10 = 0
            for im in images:
                dets = dets_by.get((im, c), [])
                gts = gts_by.get((im, c), [])
                flags = _match(dets, gts, thr)
                scored += [((-d.score, im, tuple(d.box)), f) for d, f in zip(dets, flags)]
                hits1 += sum(_match(dets[:1], gts, thr))
                hits10 += sum(_match(dets[:10], gts, thr))
            ap[ti, ci] = _average_precision(scored, n_gt)
            ar1[ti, ci] = hits1 / n_gt
            ar10[ti, ci] = hits10 / n_gt
    return EvalResult(
        mAP=float(ap.mean()),
        AP50=float(ap[0].mean()),
        AP75=float(ap[IOU_THRESHOLDS.index(0.75)].mean()),
        AR1=float(ar1.mean()),
        AR10=float(ar10.mean()),
        skipped=skipped,
        per_class={c: float(ap[:, i].mean()) for i, c in enumerate(class_list)},
    )


def write_detections_jsonl(path: str | Path, records: Iterable[DetRecord]) -> int:
    n = 0
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"image_id": r.image_id, "class": r.class_id,
                                 "box": list(r.box), "score": r.score}) + "\n")
            n += 1
    return n


def read_detections_jsonl(path: str | Path) -> list[DetRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(DetRecord(int(d["image_id"]), int(d["class"]),
                                     tuple(float(v) for v in d["box"]), float(d["score"])))
    return out
