"""Synthetic component-fault detection dataset: generation, on-disk format, loading.

Layout of a dataset directory::

    images/{id}.png
    annotations.jsonl   one record per object: {"image_id", "class_id", "box"}
    meta.json           format_version, config echo, image list, normalization
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import SynthConfig
from .label_encoder import LabelSet

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
NORMAL, FAULT = 0, 1
CLASS_NAMES = ("normal", "fault")


class DatasetFormatError(ValueError):
    pass


class FormatVersionError(DatasetFormatError):
    pass


@dataclass
class ObjectSpec:
    box_px: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive end)
    class_id: int
    key: tuple[float, float] | None  # key centre in pixels, None if missing

    def box(self, size: int) -> tuple[float, float, float, float]:
        x0, y0, x1, y1 = self.box_px
        return (x0 / size, y0 / size, x1 / size, y1 / size)


@dataclass
class DetectionSample:
    image: torch.Tensor  # (3, H, W), normalized
    labels: LabelSet
    image_id: int
    split: str


@dataclass
class Dataset:
    root: Path
    meta: dict
    samples: list[DetectionSample]
    rejected: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def _rng(seed: int, image_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, image_id])


def _overlap(a, b) -> float:
    iw = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    return iw * ih / min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))


def layout(cfg: SynthConfig, rng: np.random.Generator) -> list[ObjectSpec]:
    """Sample component boxes, classes and key positions for one image."""
    s = cfg.image_size
    lo, hi = math.ceil(cfg.min_size * s), math.floor(cfg.max_size * s)
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objs: list[ObjectSpec] = []
    for _ in range(n):
        for _attempt in range(50):
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            x0 = int(rng.integers(0, s - w + 1))
            y0 = int(rng.integers(0, s - h + 1))
            box = (x0, y0, x0 + w, y0 + h)
            if all(_overlap(box, o.box_px) < 0.15 for o in objs):
                break
        else:
            continue
        fault = bool(rng.random() < cfg.fault_rate)
        cx, cy = x0 + w / 2, y0 + h / 2
        if not fault:
            key = (cx, cy)
        elif rng.random() < 0.5:
            key = None
        else:
            sx, sy = rng.choice([-1.0, 1.0], size=2)
            key = (cx + sx * 0.3 * w, cy + sy * 0.3 * h)
        objs.append(ObjectSpec(box, FAULT if fault else NORMAL, key))
    return objs


def render(cfg: SynthConfig, objs: list[ObjectSpec], rng: np.random.Generator) -> np.ndarray:
    """Draw a textured background with bracket-and-key components: uint8 (H, W, 3)."""
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    base = rng.uniform(0.35, 0.6, size=3)
    img = np.broadcast_to(base, (s, s, 3)).copy()
    for _ in range(3):
        fx, fy, ph = rng.uniform(1, 6), rng.uniform(1, 6), rng.uniform(0, 2 * np.pi)
        img += 0.05 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)[..., None]
    # clutter: thin beams and dull patches that are not components
    for _ in range(int(round(cfg.clutter * 6))):
        shade = rng.uniform(0.2, 0.7, size=3)
        if rng.random() < 0.5:
            r = int(rng.integers(0, s))
            t = int(rng.integers(1, max(2, s // 32) + 1))
            img[r:r + t, :] = 0.5 * img[r:r + t, :] + 0.5 * shade
        else:
            x0, y0 = (int(v) for v in rng.integers(0, s, size=2))
            w, h = (int(v) for v in rng.integers(s // 16, s // 6 + 1, size=2))
            img[y0:y0 + h, x0:x0 + w] = 0.6 * img[y0:y0 + h, x0:x0 + w] + 0.4 * shade
    for o in objs:
        x0, y0, x1, y1 = o.box_px
        w, h = x1 - x0, y1 - y0
        body = rng.uniform(0.05, 0.2, size=3) + np.array([0.0, 0.0, 0.1])
        rim = np.clip(body + 0.25, 0, 1)
        img[y0:y1, x0:x1] = rim
        bw = max(1, min(w, h) // 8)
        img[y0 + bw:y1 - bw, x0 + bw:x1 - bw] = body
        if o.key is not None:
            kx, ky = o.key
            rad = max(1.5, 0.18 * min(w, h))
            disk = (xx * s + 0.5 - kx) ** 2 + (yy * s + 0.5 - ky) ** 2 <= rad ** 2
            disk[:y0, :] = disk[y1:, :] = False
            disk[:, :x0] = disk[:, x1:] = False
            img[disk] = rng.uniform(0.8, 0.95, size=3)
    img += rng.normal(0, 0.02, size=img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def _image_ids(cfg: SynthConfig) -> list[tuple[int, str]]:
    return ([(i, "train") for i in range(cfg.train_count)]
            + [(cfg.train_count + i, "test") for i in range(cfg.test_count)])


def generate_annotations(cfg: SynthConfig) -> list[dict]:
    """Annotation records only, identical to what ``generate`` writes."""
    cfg.validate()
    recs = []
    for image_id, _ in _image_ids(cfg):
        for o in layout(cfg, _rng(cfg.seed, image_id)):
            recs.append({"image_id": image_id, "class_id": o.class_id,
                         "box": list(o.box(cfg.image_size))})
    return recs


def generate(cfg: SynthConfig, out_dir: str | Path, overwrite: bool = False) -> dict:
    """Render the dataset to ``out_dir`` and return a summary."""
    cfg.validate()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} is not empty; pass overwrite=True to replace it")
        shutil.rmtree(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records, images = [], []
    total = np.zeros(3)
    total_sq = np.zeros(3)
    n_pix = 0
    for image_id, split in _image_ids(cfg):
        rng = _rng(cfg.seed, image_id)
        objs = layout(cfg, rng)
        pixels = render(cfg, objs, rng)
        name = f"images/{image_id}.png"
        Image.fromarray(pixels).save(out / name)
        images.append({"id": image_id, "split": split, "file": name})
        for o in objs:
            records.append({"image_id": image_id, "class_id": o.class_id,
                            "box": list(o.box(cfg.image_size))})
        if split == "train":
            px = pixels.reshape(-1, 3).astype(np.float64) / 255.0
            total += px.sum(0)
            total_sq += (px ** 2).sum(0)
            n_pix += len(px)
    if n_pix:
        mean = total / n_pix
        std = np.sqrt(np.maximum(total_sq / n_pix - mean ** 2, 1e-12))
    else:
        mean, std = np.full(3, 0.5), np.full(3, 0.25)
    with open(out / "annotations.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    meta = {
        "format_version": FORMAT_VERSION,
        "seed": cfg.seed,
        "config": dataclasses.asdict(cfg),
        "classes": list(CLASS_NAMES),
        "images": images,
        "normalization": {"mean": mean.tolist(), "std": std.tolist()},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    counts = [0] * cfg.num_classes
    for r in records:
        counts[r["class_id"]] += 1
    return {
        "path": str(out),
        "images": len(images),
        "train_images": cfg.train_count,
        "test_images": cfg.test_count,
        "objects": len(records),
        "per_class": dict(zip(CLASS_NAMES, counts)),
    }


def read_meta(path: str | Path) -> dict:
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"{root} has no meta.json; not a generated dataset") from None
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"{root}: dataset format version {version}, this tool reads version "
            f"{FORMAT_VERSION}; regenerate it with `faultdistill synth`")
    return meta


def read_annotations(path: str | Path) -> tuple[dict[int, list[dict]], list[str]]:
    """Parse annotations.jsonl; returns records by image id and rejection notes."""
    by_image: dict[int, list[dict]] = {}
    rejected = []
    with open(Path(path) / "annotations.jsonl") as fh:
        for idx, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image_id, class_id = int(rec["image_id"]), int(rec["class_id"])
                box = [float(v) for v in rec["box"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"annotations.jsonl record {idx}: {exc}") from None
            ok = (len(box) == 4 and all(0.0 <= v <= 1.0 for v in box)
                  and box[0] < box[2] and box[1] < box[3])
            if not ok:
                msg = f"annotations.jsonl record {idx}: invalid box {box} for image {image_id}"
                log.warning(msg)
                rejected.append(msg)
                continue
            by_image.setdefault(image_id, []).append({"class_id": class_id, "box": box})
    return by_image, rejected


def load(path: str | Path, split: str | None = "train") -> Dataset:
    """Load one split (or all, with ``split=None``) in ascending image id order."""
    root = Path(path)
    meta = read_meta(root)
    by_image, rejected = read_annotations(root)
    mean = torch.tensor(meta["normalization"]["mean"]).view(3, 1, 1)
    std = torch.tensor(meta["normalization"]["std"]).view(3, 1, 1)
    samples = []
    for entry in sorted(meta["images"], key=lambda e: e["id"]):
        if split is not None and entry["split"] != split:
            continue
        pixels = np.asarray(Image.open(root / entry["file"]).convert("RGB"), dtype=np.float32)
        img = torch.from_numpy(pixels / 255.0).permute(2, 0, 1)
        img = (img - mean) / std
        recs = by_image.get(entry["id"], [])
        labels = LabelSet(torch.tensor([r["box"] for r in recs], dtype=torch.float64).reshape(-1, 4),
                          torch.tensor([r["class_id"] for r in recs], dtype=torch.long))
        samples.append(DetectionSample(img.float(), labels, entry["id"], entry["split"]))
    return Dataset(root, meta, samples, rejected)
