"""Config-grid sweeps: one training per cell, evaluated and tabulated."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .config import RunConfig, set_dotted
from .data import load
from .distill import DistillDetector
from .backbone import count_parameters

TABLE_COLUMNS = ("mAP", "AP50", "AP75", "AR1", "AR10")


def _slug(cell: dict[str, str]) -> str:
    if not cell:
        return "base"
    return "_".join(f"{k.split('.')[-1]}={v}" for k, v in cell.items())


def cell_config(base: RunConfig, cell: dict[str, object]) -> RunConfig:
    cfg = copy.deepcopy(base)
    for key, value in cell.items():
        set_dotted(cfg, key, value)
    cfg.synth.validate()
    cfg.distill.validate()
    return cfg


def run_report(base: RunConfig, cells: list[dict[str, str]], out: Path) -> dict:
    """Train and evaluate every grid cell with the base seed; write report.md/json."""
    from .cli import run_training
    from .trainer import evaluate_model

    test = load(base.data_dir, "test")
    rows = []
    for cell in cells:
        cfg = cell_config(base, cell)
        run_dir = out / "cells" / _slug(cell)
        run_dir.mkdir(parents=True, exist_ok=True)
        result = run_training(cfg, run_dir)
        model: DistillDetector = result["state"].model
        log_rows = result["rows"]
        metrics = evaluate_model(model, test.samples)[0] if len(test) else None
        row = {
            "cell": _slug(cell),
            **{k.split(".")[-1]: v for k, v in cell.items()},
            "seed": cfg.distill.seed,
            "iters": len(log_rows),
            "student_params": model.inference_parameters(),
            "total_params": count_parameters(model),
            "sum_L_det_S": sum(r["L_det_S"] for r in log_rows),
            "sum_L_det_T": sum(r["L_det_T"] for r in log_rows),
            "sum_L_distill": sum(r["L_distill"] for r in log_rows),
            "sum_L_total": sum(r["L_total"] for r in log_rows),
            "final_L_total": log_rows[-1]["L_total"] if log_rows else float("nan"),
            "run_dir": str(run_dir),
        }
        if metrics is not None:
            row.update({k: getattr(metrics, k) for k in TABLE_COLUMNS})
        rows.append(row)
    md = to_markdown(rows, [k.split(".")[-1] for k in (cells[0] if cells else {})])
    (out / "report.md").write_text(md + "\n")
    (out / "report.json").write_text(json.dumps(rows, indent=2))
    if rows and cells and len(cells[0]) == 1 and "mAP" in rows[0]:
        _plot(rows, next(iter(cells[0])).split(".")[-1], out / "sweep.png")
    return {"rows": rows, "markdown": md}


def paired_comparison(base: RunConfig, seeds: list[int], out: Path,
                      callback=None) -> dict:
    """Distilled student vs. a teacher-free baseline, one pair per seed.

    Both members of a pair share the seed, data and iteration budget; the
    baseline trains with lambda=0 and the teacher branch removed. Returns
    per-seed rows and the number of seeds where the distilled test mAP is at
    least the baseline's.
    """
    from .cli import run_training
    from .trainer import evaluate_model

    test = load(base.data_dir, "test")
    if len(test) == 0:
        raise ValueError(f"{base.data_dir} has an empty test split")
    rows = []
    for seed in seeds:
        row: dict = {"seed": seed}
        for arm, overrides in (("baseline", {"distill.lam": 0.0, "distill.use_teacher": False}),
                               ("distilled", {"distill.lam": base.distill.lam or 1.0,
                                              "distill.use_teacher": True})):
            cfg = cell_config(base, {"distill.seed": seed, **overrides})
            run_dir = out / f"seed{seed}_{arm}"
            run_dir.mkdir(parents=True, exist_ok=True)
            model = run_training(cfg, run_dir)["state"].model
            res = evaluate_model(model, test.samples)[0]
            row[f"{arm}_mAP"] = res.mAP
            row[f"{arm}_AP50"] = res.AP50
            row[f"{arm}_dir"] = str(run_dir)
        row["delta"] = row["distilled_mAP"] - row["baseline_mAP"]
        rows.append(row)
        if callback is not None:
            callback(row)
    wins = sum(r["distilled_mAP"] >= r["baseline_mAP"] for r in rows)
    summary = {"rows": rows, "wins": wins, "seeds": len(rows),
               "iters": base.distill.total_iters, "image_size": base.distill.image_size}
    lines = ["| seed | baseline mAP | distilled mAP | delta |", "|---|---|---|---|"]
    lines += [f"| {r['seed']} | {r['baseline_mAP']:.4f} | {r['distilled_mAP']:.4f} | {r['delta']:+.4f} |"
              for r in rows]
    lines.append(f"\ndistilled >= baseline in {wins} of {len(rows)} seeds")
    summary["markdown"] = "\n".join(lines)
    (out / "paired.json").write_text(json.dumps(summary, indent=2))
    (out / "paired.md").write_text(summary["markdown"] + "\n")
    return summary


def to_markdown(rows: list[dict], axes: list[str]) -> str:
    cols = axes + ["seed", "iters", *[c for c in TABLE_COLUMNS if rows and c in rows[0]],
                   "student_params", "total_params", "sum_L_distill", "sum_L_total"]
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join("---" for _ in cols) + "|"]
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c, "")
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def _plot(rows: list[dict], axis: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [str(r[axis]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, [r["mAP"] for r in rows], marker="o", label="mAP")
    ax.plot(xs, [r["AP50"] for r in rows], marker="s", label="AP50")
    ax.set_xlabel(axis)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
