"""Joint teacher-student training loop, run logs and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import ConfigError, DistillConfig
from .data import DetectionSample
from .distill import DistillDetector, infer, total_loss
from .metrics import DetRecord, EvalResult, GTRecord, evaluate

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "L_det_S", "L_det_T", "L_distill", "L_total", "lr")
CKPT_MAGIC = b"FDDCKPT"
CKPT_VERSION = 1
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 200


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainState:
    cfg: DistillConfig
    model: DistillDetector
    optimizer: torch.optim.Optimizer
    iteration: int
    rng: np.random.Generator
    order: np.ndarray
    cursor: int
    initial_loss: float | None = None
    over_count: int = 0


def learning_rate(cfg: DistillConfig, iteration: int) -> float:
    """Linear warm-up from lr_start to lr_peak, then constant."""
    if cfg.warmup_iters and iteration < cfg.warmup_iters:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * iteration / cfg.warmup_iters
    return cfg.lr_peak


def _optimizer(cfg: DistillConfig, model: torch.nn.Module) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.dim() <= 1 else decay).append(p)
    return torch.optim.SGD(
        [{"params": decay, "weight_decay": cfg.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr_start, momentum=cfg.momentum)


def init_state(cfg: DistillConfig, dataset_size: int) -> TrainState:
    cfg.validate()
    if dataset_size < 1:
        raise ValueError("training needs a non-empty dataset")
    torch.manual_seed(cfg.seed)
    model = DistillDetector(cfg)
    rng = np.random.default_rng(cfg.seed)
    return TrainState(cfg, model, _optimizer(cfg, model), 0, rng,
                      rng.permutation(dataset_size), 0)


def _next_batch(state: TrainState, n: int) -> list[int]:
    idx = []
    while len(idx) < state.cfg.batch_size:
        if state.cursor >= len(state.order):
            state.order = state.rng.permutation(n)
            state.cursor = 0
        take = min(state.cfg.batch_size - len(idx), len(state.order) - state.cursor)
        idx += state.order[state.cursor:state.cursor + take].tolist()
        state.cursor += take
    return idx


def train_step(state: TrainState, samples: Sequence[DetectionSample]) -> dict[str, float]:
    cfg, model = state.cfg, state.model
    model.train()
    idx = _next_batch(state, len(samples))
    images = torch.stack([samples[i].image for i in idx])
    if images.shape[-1] != cfg.image_size or images.shape[-2] != cfg.image_size:
        raise ConfigError(
            f"model expects {cfg.image_size}px images, dataset has {tuple(images.shape[-2:])}")
    labels = [samples[i].labels for i in idx]
    lr = learning_rate(cfg, state.iteration)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss, parts = total_loss(model, images, labels)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at iteration {state.iteration + 1}: {parts}")
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.iteration += 1
    value = loss.item()
    if state.initial_loss is None:
        state.initial_loss = value
    if value > DIVERGENCE_FACTOR * state.initial_loss:
        state.over_count += 1
        if state.over_count >= DIVERGENCE_PATIENCE:
            raise DivergenceError(
                f"loss {value:.4g} above {DIVERGENCE_FACTOR}x its initial value "
                f"{state.initial_loss:.4g} for {DIVERGENCE_PATIENCE} iterations")
    else:
        state.over_count = 0
    return {"iter": state.iteration, "L_det_S": parts["det_s"].item(),
            "L_det_T": parts["det_t"].item(), "L_distill": parts["distill"].item(),
            "L_total": value, "lr": lr}


def train(cfg: DistillConfig, samples: Sequence[DetectionSample], state: TrainState | None = None,
          iters: int | None = None, log_path: str | Path | None = None,
          ckpt_dir: str | Path | None = None,
          callback: Callable[[dict], None] | None = None) -> tuple[TrainState, list[dict]]:
    """Run ``iters`` optimization steps (default: up to ``cfg.total_iters``).

    Rows are appended to ``log_path`` as CSV; with ``cfg.checkpoint_every``
    set, checkpoints land in ``ckpt_dir`` and ``last.ckpt`` is always written
    at the end when a directory is given.
    """
    if len(samples) == 0:
        raise ValueError("training needs a non-empty dataset")
    torch.use_deterministic_algorithms(True)
    if state is None:
        state = init_state(cfg, len(samples))
    if iters is None:
        iters = max(0, cfg.total_iters - state.iteration)
    rows = []
    writer = fh = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = not log_path.exists() or log_path.stat().st_size == 0
        fh = open(log_path, "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if fresh:
            writer.writeheader()
    try:
        for _ in range(iters):
            row = train_step(state, samples)
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
            if callback is not None:
                callback(row)
            every = state.cfg.checkpoint_every
            if ckpt_dir is not None and every and state.iteration % every == 0:
                save_checkpoint(state, Path(ckpt_dir) / f"iter_{state.iteration:06d}.ckpt")
    finally:
        if fh is not None:
            fh.close()
    if ckpt_dir is not None:
        save_checkpoint(state, Path(ckpt_dir) / "last.ckpt")
    return state, rows


def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CKPT_VERSION,
        "config": dataclasses.asdict(state.cfg),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "iteration": state.iteration,
        "rng": state.rng.bit_generator.state,
        "order": state.order.tolist(),
        "cursor": state.cursor,
        "initial_loss": state.initial_loss,
        "over_count": state.over_count,
        "torch_rng": torch.get_rng_state(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    header = CKPT_MAGIC + bytes([CKPT_VERSION]) + state.cfg.model_hash().encode() + b"\n"
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + buf.getvalue())
    tmp.replace(path)


def read_checkpoint_header(path: str | Path) -> tuple[int, str]:
    with open(path, "rb") as fh:
        head = fh.readline()
    if not head.startswith(CKPT_MAGIC) or len(head) < len(CKPT_MAGIC) + 2:
        raise CheckpointError(f"{path} is not a checkpoint written by this tool")
    return head[len(CKPT_MAGIC)], head[len(CKPT_MAGIC) + 1:].strip().decode()


def load_checkpoint(path: str | Path, cfg: DistillConfig | None = None) -> TrainState:
    """Restore a training state. With ``cfg`` given, its model hash must match."""
    version, digest = read_checkpoint_header(path)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    if cfg is not None and cfg.model_hash() != digest:
        raise CheckpointError(
            f"{path}: config hash {cfg.model_hash()} does not match checkpoint hash {digest}")
    raw = Path(path).read_bytes()
    payload = torch.load(io.BytesIO(raw[raw.index(b"\n") + 1:]), weights_only=False)
    saved = DistillConfig(**payload["config"])
    if cfg is not None:
        # training-only knobs may change on resume; shapes may not
        saved = dataclasses.replace(cfg)
    model = DistillDetector(saved)
    model.load_state_dict(payload["model"])
    optimizer = _optimizer(saved, model)
    optimizer.load_state_dict(payload["optimizer"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng"]
    torch.set_rng_state(payload["torch_rng"])
    return TrainState(saved, model, optimizer, payload["iteration"], rng,
                      np.asarray(payload["order"], dtype=np.int64), payload["cursor"],
                      payload["initial_loss"], payload["over_count"])


def evaluate_model(model: DistillDetector, samples: Sequence[DetectionSample],
                   batch_size: int = 16) -> tuple[EvalResult, list[DetRecord]]:
    """Student-only inference over ``samples`` followed by COCO-style scoring."""
    dets: list[DetRecord] = []
    gts: list[GTRecord] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = torch.stack([s.image for s in chunk])
        for s, d in zip(chunk, infer(model, images)):
            for box, score, cls in zip(d.boxes.tolist(), d.scores.tolist(), d.classes.tolist()):
                dets.append(DetRecord(s.image_id, int(cls), tuple(box), float(score)))
    for s in samples:
        for box, cls in zip(s.labels.boxes.tolist(), s.labels.classes.tolist()):
            gts.append(GTRecord(s.image_id, int(cls), tuple(box)))
    return evaluate(dets, gts), dets


def smoothed(values: Sequence[float], window: int = 50) -> list[float]:
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out

