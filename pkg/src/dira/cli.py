"""Command-line interface.

Subcommands: ``datagen``, ``pretrain``, ``finetune``, ``eval``,
``localize``, ``report``.  Exit codes: 0 success, 2 configuration error,
3 I/O error (missing datasets/checkpoints/paths).  The ``DIRA_HOME``
environment variable provides the default output root when ``--out`` is
omitted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from dira import __version__


def _resolve_out(out_arg: str | None, subdir: str) -> Path:
    if out_arg:
        return Path(out_arg)
    home = os.environ.get("DIRA_HOME")
    if home:
        return Path(home) / subdir
    raise ValueError("no output location: pass --out or set DIRA_HOME")


def _parse_deltas(text: str) -> list[float]:
    """Either 'start:stop:step' (inclusive sweep) or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"delta sweep must be start:stop:step, got {text!r}")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ValueError(f"invalid delta sweep {text!r}")
        n = int(round((stop - start) / step)) + 1
        deltas = [round(start + i * step, 10) for i in range(n)]
    else:
        deltas = [float(p) for p in text.split(",") if p.strip()]
    if not deltas:
        raise ValueError("no deltas given")
    for d in deltas:
        if not (0.0 < d < 1.0):
            raise ValueError(f"deltas must lie in (0, 1), got {d}")
    return deltas


# --------------------------------------------------------------------------
# subcommand handlers
# --------------------------------------------------------------------------

def cmd_datagen(args: argparse.Namespace) -> int:
    from dira.datasets import PhantomParams, build_dataset

    params = PhantomParams(
        height=args.height, width=args.width, k_templates=args.k_templates,
        lesion_probability=args.lesion_prob, n_lesion_classes=args.lesion_classes,
        template_jitter=args.jitter, texture_strength=args.texture,
    )
    params.validate()
    out = _resolve_out(args.out, f"datasets/seed{args.seed}_n{args.n}")
    manifest = build_dataset(args.seed, args.n, params, out)
    n_pos = sum(1 for r in manifest.records if r.lesion_present)
    print(f"wrote {manifest.n_samples} samples ({n_pos} with lesions) to {out}")
    print(f"manifest: {out / 'manifest.json'}")
    return 0


def _pretrain_config(args: argparse.Namespace):
    from dira.config import ExperimentConfig

    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as e:
                raise ValueError(f"config {args.config} is not valid JSON: {e}") from e
    else:
        raw = {}
    if args.dataset:
        raw.setdefault("dataset", {})["path"] = args.dataset
    if args.method:
        raw.setdefault("method", {})["name"] = args.method
    if args.ablation:
        raw["ablation"] = args.ablation
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.stage_epochs:
        s1, s2, s3 = args.stage_epochs
        sched = raw.setdefault("schedule", {})
        sched["stage1_epochs"], sched["stage2_epochs"], sched["stage3_epochs"] = s1, s2, s3
    if args.batch_size:
        raw.setdefault("schedule", {})["batch_size"] = args.batch_size
    out = _resolve_out(args.out or raw.get("output_dir"), "pretrain")
    raw["output_dir"] = str(out)
    cfg = ExperimentConfig.from_dict(raw)
    cfg.validate()
    if not cfg.dataset.path:
        raise ValueError("a dataset is required: pass --dataset or set dataset.path in the config")
    return cfg


def cmd_pretrain(args: argparse.Namespace) -> int:
    from dira.pretrain import run_pretraining

    cfg = _pretrain_config(args)
    resume_from = None
    if args.resume:
        last = Path(cfg.output_dir) / "checkpoints" / "last"
        if not last.is_dir():
            raise FileNotFoundError(f"--resume given but no checkpoint at {last}")
        resume_from = last
    best = run_pretraining(cfg, resume_from=resume_from, record_timing=args.wall_time)
    print(f"metrics: {Path(cfg.output_dir) / 'metrics.csv'}")
    print(f"best checkpoint: {best}")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    from dira.transfer import DownstreamTask, FineTuneConfig, finetune

    if bool(args.checkpoint) == bool(args.random_init):
        raise ValueError("pass exactly one of --checkpoint or --random-init")
    checkpoint = args.checkpoint if args.checkpoint else None
    if checkpoint is not None and not (Path(checkpoint) / "manifest.json").is_file():
        raise FileNotFoundError(f"no checkpoint at {checkpoint}")
    if not (Path(args.dataset) / "manifest.json").is_file():
        raise FileNotFoundError(f"no dataset manifest under {args.dataset}")

    task = DownstreamTask(kind=args.task, dataset_dir=args.dataset, fraction=args.fraction,
                          metric=args.metric or "")
    cfg = FineTuneConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                         patience=args.patience)
    out = _resolve_out(args.out, f"finetune/{args.task}")
    ledger = args.ledger
    if ledger is None:
        home = os.environ.get("DIRA_HOME")
        ledger = (Path(home) / "results_ledger.csv") if home else (out / "results_ledger.csv")
    result = finetune(checkpoint, task, runs=args.runs, seed=args.seed, train_cfg=cfg,
                      out_dir=out, ledger_path=ledger, method_label=args.label)
    print(f"{result.method} {result.task} {result.metric} fraction={result.fraction:g}: "
          f"mean={result.mean:.4f} std={result.std:.4f} over {len(result.values)} runs")
    print(f"result: {out / 'result.json'}")
    print(f"ledger: {ledger}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from dira.transfer import evaluate_model

    metrics = evaluate_model(args.model, args.dataset, test_fraction=args.test_fraction)
    print(json.dumps(metrics, sort_keys=True, indent=2))
    return 0


def cmd_localize(args: argparse.Namespace) -> int:
    from dira.localization import localize_dataset, write_localization_csv
    from dira.transfer import load_transfer_model

    model, meta = load_transfer_model(args.model)
    if meta.get("task") != "classification":
        raise ValueError("localization needs a fine-tuned classification model")
    label = args.label or meta.get("method", "model")
    deltas = _parse_deltas(args.deltas)
    rows, examples = localize_dataset(
        model, args.dataset, deltas, method_label=label, reading=args.reading,
        low=args.low, high=args.high, collect_examples=args.overlays)
    out = _resolve_out(args.out, "localization") if (args.out is None or not args.out.endswith(".csv")) \
        else Path(args.out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "localization.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_localization_csv(out, rows)
    for row in rows:
        print(f"delta={row['delta']}: {row['correct']}/{row['total']} acc={row['accuracy']}")
    print(f"csv: {out}")
    if examples:
        overlay_dir = out.parent / "overlays"
        overlay_dir.mkdir(parents=True, exist_ok=True)
        _save_overlays(overlay_dir, examples)
        print(f"overlays: {overlay_dir}")
    return 0


def _save_overlays(overlay_dir: Path, examples) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib import patches

    for image_id, image, heat, boxes, gt in examples:
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(image[..., 0], cmap="gray", vmin=0, vmax=1)
        ax.imshow(heat, cmap="jet", alpha=0.35, vmin=0, vmax=255)
        for b in gt:
            ax.add_patch(patches.Rectangle((b.x_min - 0.5, b.y_min - 0.5), b.width, b.height,
                                           fill=False, edgecolor="lime", linewidth=1.5))
        for b in boxes:
            ax.add_patch(patches.Rectangle((b.x_min - 0.5, b.y_min - 0.5), b.width, b.height,
                                           fill=False, edgecolor="red", linewidth=1.2))
        ax.set_axis_off()
        fig.tight_layout(pad=0.1)
        fig.savefig(overlay_dir / f"{image_id}.png", dpi=120)
        plt.close(fig)


def cmd_report(args: argparse.Namespace) -> int:
    from dira.report import build_tables

    out = _resolve_out(args.out, "report")
    written = build_tables(args.ledger, out, localization_csvs=args.localization or [])
    print(f"report: {written['report']}")
    for key in sorted(written):
        if key != "report":
            print(f"  {key}: {written[key]}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dira", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"dira {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="generate a synthetic phantom dataset")
    d.add_argument("--out", help="output directory (default: under DIRA_HOME)")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--n", type=int, default=200, help="number of samples")
    d.add_argument("--height", type=int, default=64)
    d.add_argument("--width", type=int, default=64)
    d.add_argument("--k-templates", type=int, default=8)
    d.add_argument("--lesion-prob", type=float, default=0.5)
    d.add_argument("--lesion-classes", type=int, default=3)
    d.add_argument("--jitter", type=float, default=1.5)
    d.add_argument("--texture", type=float, default=0.08)
    d.set_defaults(func=cmd_datagen)

    t = sub.add_parser("pretrain", help="staged self-supervised pretraining")
    t.add_argument("--config", help="experiment config JSON; flags override its fields")
    t.add_argument("--dataset", help="dataset directory")
    t.add_argument("--out", help="output directory")
    t.add_argument("--method", choices=("moco", "simsiam", "barlow", "classwise"))
    t.add_argument("--ablation", choices=("di", "dir", "dira"))
    t.add_argument("--seed", type=int)
    t.add_argument("--stage-epochs", type=int, nargs=3, metavar=("S1", "S2", "S3"))
    t.add_argument("--batch-size", type=int)
    t.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")
    t.add_argument("--wall-time", action="store_true",
                   help="record real epoch durations (breaks byte-determinism of metrics.csv)")
    t.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="transfer fine-tuning with repeated runs")
    f.add_argument("--checkpoint", help="pretraining checkpoint directory")
    f.add_argument("--random-init", action="store_true", help="train from scratch as baseline")
    f.add_argument("--dataset", required=True)
    f.add_argument("--task", required=True, choices=("classification", "segmentation"))
    f.add_argument("--fraction", type=float, default=1.0, help="labeled fraction of the train split")
    f.add_argument("--metric", choices=("auc", "dice", "iou"))
    f.add_argument("--runs", type=int, default=10)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--epochs", type=int, default=60)
    f.add_argument("--batch-size", type=int, default=16)
    f.add_argument("--lr", type=float)
    f.add_argument("--patience", type=int, default=10)
    f.add_argument("--out", help="output directory")
    f.add_argument("--ledger", help="results ledger CSV (default: DIRA_HOME/results_ledger.csv)")
    f.add_argument("--label", help="method label for the ledger (default: from checkpoint)")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate a fine-tuned model on a dataset's test split")
    e.add_argument("--model", required=True, help="fine-tuned model directory")
    e.add_argument("--dataset", required=True)
    e.add_argument("--test-fraction", type=float, default=0.2)
    e.set_defaults(func=cmd_eval)

    l = sub.add_parser("localize", help="Grad-CAM localization sweep")
    l.add_argument("--model", required=True, help="fine-tuned classification model directory")
    l.add_argument("--dataset", required=True)
    l.add_argument("--out", help="output CSV path or directory")
    l.add_argument("--deltas", default="0.1:0.6:0.1", help="IoU thresholds, start:stop:step or comma list")
    l.add_argument("--reading", choices=("hysteresis", "single_low", "single_high"),
                   default="hysteresis")
    l.add_argument("--low", type=int, default=60)
    l.add_argument("--high", type=int, default=180)
    l.add_argument("--label", help="method label for the CSV (default: from model metadata)")
    l.add_argument("--overlays", type=int, default=0, help="save up to N overlay images")
    l.set_defaults(func=cmd_localize)

    r = sub.add_parser("report", help="aggregate results into tables and plots")
    r.add_argument("--ledger", required=True)
    r.add_argument("--out", help="report output directory")
    r.add_argument("--localization", action="append", help="localization CSV (repeatable)")
    r.set_defaults(func=cmd_report)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
