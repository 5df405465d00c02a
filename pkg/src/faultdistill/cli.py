"""Command-line entry points: synth, train, eval, report.

Exit codes: 0 success, 2 usage or input error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .data import DatasetFormatError, generate, load
from .label_encoder import AnnotationError
from .trainer import CheckpointError, DivergenceError

log = logging.getLogger("faultdistill")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. distill.lr_peak=0.02 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--overwrite", action="store_true")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iters", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--segments", type=int)
    p.add_argument("--fpn-channels", dest="fpn_channels", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faultdistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic fault dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int)
    p.add_argument("--train-count", type=int)
    p.add_argument("--test-count", type=int)

    p = sub.add_parser("train", help="train a distilled (or baseline) detector")
    _common(p)
    _train_flags(p)
    p.add_argument("--data", help="dataset directory (default: config data_dir)")
    p.add_argument("--out", help="run directory (default: config out_dir)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--json", dest="json_out", help="also write the metrics JSON here")
    p.add_argument("--detections", help="write detections as JSON lines here")

    p = sub.add_parser("report", help="run a config grid and tabulate results")
    _common(p)
    _train_flags(p)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...",
                   help="sweep axis, e.g. tau=1,5,10,15,20 (repeatable; cartesian product)")
    p.add_argument("--paired-seeds", metavar="S1,S2,...",
                   help="instead of a grid, compare the distilled student against a "
                        "teacher-free baseline once per seed")
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"synth.seed={args.seed}", f"distill.seed={args.seed}"]
    for flag, key in (("iters", "distill.total_iters"), ("lam", "distill.lam"),
                      ("tau", "distill.tau"), ("segments", "distill.segments"),
                      ("fpn_channels", "distill.fpn_channels"),
                      ("image_size", "synth.image_size"), ("train_count", "synth.train_count"),
                      ("test_count", "synth.test_count")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    cfg = load_config(args.config, overrides)
    if getattr(args, "data", None):
        cfg.data_dir = args.data
    if getattr(args, "out", None) and args.command == "train":
        cfg.out_dir = args.out
    return cfg


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _config(args)
    summary = generate(cfg.synth, args.out, overwrite=args.overwrite)
    print(f"wrote {summary['images']} images ({summary['train_images']} train, "
          f"{summary['test_images']} test) with {summary['objects']} objects to {summary['path']}")
    print("per class: " + ", ".join(f"{k}={v}" for k, v in summary["per_class"].items()))
    print(json.dumps(summary))
    return EXIT_OK


def _prepare_run_dir(out: Path, overwrite: bool, resuming: bool) -> None:
    if out.exists() and any(out.iterdir()) and not resuming:
        if not overwrite:
            raise UsageError(f"{out} already holds a run; pass --overwrite or --resume")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def plot_losses(rows: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .trainer import smoothed

    its = [r["iter"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("L_total", "L_det_S", "L_det_T", "L_distill"):
        ax.plot(its, smoothed([r[key] for r in rows]), label=key)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss (smoothed)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _rewrite_log(path: Path, upto: int) -> None:
    """Drop rows written after iteration ``upto`` so a resumed log continues exactly."""
    from .trainer import LOG_COLUMNS, read_log

    kept = [r for r in read_log(path) if r["iter"] <= upto]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        w.writerows(kept)


def run_training(cfg: RunConfig, out: Path, resume: str | None = None,
                 extra_iters: int | None = None) -> dict:
    """Train into ``out``; with ``resume``, ``extra_iters`` counts additional steps."""
    from .trainer import load_checkpoint, read_log, train

    train_set = load(cfg.data_dir, "train")
    if len(train_set) == 0:
        raise UsageError(f"{cfg.data_dir} has no training images")
    state = None
    log_path = out / "log.csv"
    if resume:
        state = load_checkpoint(resume, cfg.distill)
        if extra_iters is not None:
            cfg.distill.total_iters = state.iteration + extra_iters
            state.cfg.total_iters = cfg.distill.total_iters
        if log_path.exists():
            _rewrite_log(log_path, state.iteration)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    state, _ = train(cfg.distill, train_set.samples, state=state,
                     log_path=log_path, ckpt_dir=out / "checkpoints")
    rows = read_log(log_path)
    if rows:
        plot_losses(rows, out / "loss.png")
    return {"state": state, "rows": rows}


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    _prepare_run_dir(out, args.overwrite, bool(args.resume))
    result = run_training(cfg, out, args.resume, args.iters if args.resume else None)
    rows = result["rows"]
    last = rows[-1] if rows else {}
    print(f"trained to iteration {result['state'].iteration}; "
          f"final L_total={last.get('L_total', float('nan')):.4f}; run dir {out}")
    return EXIT_OK


def _metrics_table(res: dict) -> str:
    keys = ("mAP", "AP50", "AP75", "AR1", "AR10")
    head = "| " + " | ".join(keys) + " |"
    sep = "|" + "|".join("---" for _ in keys) + "|"
    row = "| " + " | ".join(f"{res[k]:.4f}" for k in keys) + " |"
    return "\n".join([head, sep, row])


def cmd_eval(args: argparse.Namespace) -> int:
    from .metrics import write_detections_jsonl
    from .trainer import load_checkpoint, evaluate_model

    cfg = _config(args)
    explicit = args.config is not None or args.overrides or args.fpn_channels or args.segments
    state = load_checkpoint(args.checkpoint, cfg.distill if explicit else None)
    ds = load(cfg.data_dir, args.split)
    if len(ds) == 0:
        raise UsageError(f"{cfg.data_dir} has an empty {args.split} split; nothing to evaluate")
    res, dets = evaluate_model(state.model, ds.samples)
    out = res.to_dict()
    out["split"] = args.split
    out["images"] = len(ds)
    print(_metrics_table(out))
    print(json.dumps(out))
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(out, indent=2))
    if args.detections:
        write_detections_jsonl(args.detections, dets)
    return EXIT_OK


def parse_grid(items: list[str]) -> list[dict[str, str]]:
    axes = []
    for item in items:
        if "=" not in item:
            raise UsageError(f"grid axis {item!r} is not of the form key=v1,v2")
        key, values = item.split("=", 1)
        key = key.strip()
        if "." not in key:
            key = f"distill.{key}"
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise UsageError(f"grid axis {key} has no values")
        axes.append((key, vals))
    cells: list[dict[str, str]] = [{}]
    for key, vals in axes:
        cells = [{**c, key: v} for c in cells for v in vals]
    return cells


def cmd_report(args: argparse.Namespace) -> int:
    from .report import paired_comparison, run_report

    base = _config(args)
    if args.paired_seeds and args.grid:
        raise UsageError("--paired-seeds and --grid are mutually exclusive")
    seeds = None
    if args.paired_seeds:
        try:
            seeds = [int(s) for s in args.paired_seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"--paired-seeds expects integers, got {args.paired_seeds!r}") from None
    cells = parse_grid(args.grid)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.overwrite:
            raise UsageError(f"{out} is not empty; pass --overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    if seeds is not None:
        report = paired_comparison(base, seeds, out)
    else:
        report = run_report(base, cells, out)
    print(report["markdown"])
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, DatasetFormatError, AnnotationError, CheckpointError,
            FileExistsError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
