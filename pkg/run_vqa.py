#!/usr/bin/env python3
"""
Surgical VQA: Main Entry Point.

Subcommands:
  datagen          Render a synthetic surgical dataset (frames, annotations, QA)
  tokenizer-train  Train the subword vocab on a dataset's QA text
  train            Train a classification or sentence model (optionally k-fold)
  eval             Score a checkpoint on a dataset split
  ablate           Patch-grid × encoder-variant sweep
  params           Closed-form encoder parameter accounting
  ask              Answer one question about one frame (or clip)

Usage:
  python run_vqa.py datagen --style endovis --sequences 14 --frames 20 --out data/endovis
  python run_vqa.py tokenizer-train --dataset data/endovis
  python run_vqa.py train --dataset data/endovis --mode classification --profile test
  python run_vqa.py eval --checkpoint results/train/best.svqa --split test
  python run_vqa.py ablate --dataset data/endovis --profile test --deterministic
  python run_vqa.py params --profile full
  python run_vqa.py ask --checkpoint results/train/best.svqa --image frame.png --question "where is grasper located?"
"""

import os
import sys

# BLAS thread pools must be pinned before numpy is first imported.
if "--deterministic" in sys.argv:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[_var] = "1"

import argparse
import json
import time
from pathlib import Path

from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from src.ablation import parameter_report, run_ablation
from src.config import check_compatible, default_output_root, parse_overrides, resolve_config, with_overrides
from src.data import load_manifest, write_dataset
from src.errors import ContractError, VQAError
from src.model import answer_label, answer_sentence
from src.reporter import generate_report
from src.trainer import (
    EXECUTION_ONLY,
    evaluate_model,
    load_trained,
    open_dataset,
    train_dataset_vocab,
    train_kfold,
    train_model,
)
from src.vision import load_image
from src.visualizer import generate_ablation_charts, generate_loss_curve, generate_parameter_chart

console = Console()


# --- argument parsing ---


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    """Options that resolve into a RunConfig."""
    parser.add_argument("--dataset", type=str, default=None, help="Generated dataset directory.")
    parser.add_argument("--style", choices=["endovis", "cholec"], default=None, help="Dataset style (default: from manifest).")
    parser.add_argument("--mode", choices=["classification", "sentence"], default=None, help="Answer mode (default: classification).")
    parser.add_argument("--variant", choices=["baseline", "resmlp"], default=None, help="Encoder variant.")
    parser.add_argument("--patches", type=int, default=None, help="Patch grid n (n^2 visual tokens, n in 1..5).")
    parser.add_argument("--temporal", action="store_true", default=None, help="Use 3-frame clips and the 3D extractor.")
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--beam-width", type=int, default=None)
    parser.add_argument("--output-dir", type=str, default=None, help="Output directory (default: $SVQA_OUTPUT_ROOT or results/).")
    parser.add_argument("--profile", type=str, default=None, help="Named profile from config/profiles.yaml (e.g. test, full).")
    parser.add_argument("--config", type=str, default=None, help="Flat YAML config file ('key: value' per line).")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Override any config key (repeatable).")
    parser.add_argument("--deterministic", action="store_true", help="Single-threaded, byte-stable outputs.")


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Surgical visual question answering: data, training, evaluation and ablations",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python run_vqa.py datagen --style cholec --sequences 6 --frames 10 --out data/cholec
  python run_vqa.py train --dataset data/cholec --mode sentence --profile test --temporal
  python run_vqa.py train --dataset data/endovis --kfold 3 --profile test
  python run_vqa.py params --set cross_channel_hidden=1200
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="Render a synthetic dataset.")
    p.add_argument("--style", choices=["endovis", "cholec"], default="endovis")
    p.add_argument("--sequences", type=int, default=14, help="Number of sequences (default: 14).")
    p.add_argument("--frames", type=int, default=20, help="Frames per sequence (default: 20).")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64, help="Square frame size in pixels (>= 32).")
    p.add_argument("--format", choices=["png", "imgf"], default="png", dest="image_format")
    p.add_argument("--out", type=str, required=True, help="Output directory.")
    p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("tokenizer-train", help="Train the subword vocab on a dataset.")
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--vocab-size", type=int, default=1000)
    p.add_argument("--min-freq", type=int, default=2)
    p.add_argument("--cased", action="store_true", help="Keep case (default: lowercase).")
    p.add_argument("--out", type=str, default=None, help="Vocab path (default: <dataset>/vocab.txt).")

    p = sub.add_parser("train", help="Train a model.")
    _add_run_options(p)
    p.add_argument("--kfold", type=int, default=None, help="Run a k-fold study (one model per fold).")

    p = sub.add_parser("eval", help="Evaluate a checkpoint.")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--dataset", type=str, default=None, help="Dataset to score on (default: the training dataset).")
    p.add_argument("--mode", choices=["classification", "sentence"], default=None)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--beam-width", type=int, default=None)
    p.add_argument("--output-dir", type=str, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("ablate", help="Patch-grid × variant sweep.")
    _add_run_options(p)
    p.add_argument("--temporal-sweep", action=argparse.BooleanOptionalAction, default=None,
                   help="Add temporal rows (default: on in sentence mode).")

    p = sub.add_parser("params", help="Encoder parameter accounting.")
    _add_run_options(p)

    p = sub.add_parser("ask", help="Answer one question.")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--image", type=str, action="append", required=True,
                   help="Frame path; give three (oldest first) for temporal checkpoints.")
    p.add_argument("--question", type=str, required=True)
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--beam-width", type=int, default=None)

    return parser.parse_args(argv)


def _resolve_run(args: argparse.Namespace):
    overrides = parse_overrides(args.set)
    flags = {
        "dataset": args.dataset,
        "variant": args.variant,
        "patches": args.patches,
        "temporal": args.temporal,
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "lr": args.lr,
        "seed": args.seed,
        "beam_width": args.beam_width,
        "output_dir": args.output_dir,
        "deterministic": args.deterministic or None,
    }
    if getattr(args, "kfold", None):
        flags["kfold"] = args.kfold
    overrides.update({k: v for k, v in flags.items() if v is not None})

    style = args.style
    dataset = overrides.get("dataset")
    if style is None and dataset and (Path(dataset) / "manifest.json").exists():
        style = load_manifest(dataset).style
    return resolve_config(
        style=style or "endovis",
        mode=args.mode or "classification",
        profile=args.profile,
        config_file=args.config,
        overrides=overrides,
    )


def _out_dir(run_dir: str | None, command: str) -> Path:
    return Path(run_dir) if run_dir else default_output_root() / command


# --- commands ---


def cmd_datagen(args: argparse.Namespace) -> None:
    console.print(Panel(f"[bold]Dataset generation[/bold]\n{args.style}, {args.sequences} × {args.frames} frames, seed {args.seed}", style="blue"))
    manifest = write_dataset(
        args.out, args.style, args.sequences, args.frames, args.seed, args.image_size, args.image_format
    )
    table = Table(title="Dataset")
    table.add_column("Item", style="bold")
    table.add_column("Value")
    table.add_row("Sequences", str(len(manifest.sequences)))
    table.add_row("Frames", str(manifest.frame_count()))
    table.add_row("Output", args.out)
    console.print(table)


def cmd_tokenizer_train(args: argparse.Namespace) -> None:
    vocab = train_dataset_vocab(args.dataset, args.vocab_size, args.min_freq, lowercase=not args.cased)
    path = Path(args.out) if args.out else Path(args.dataset) / "vocab.txt"
    vocab.save(path)
    console.print(f"[green]Vocab of {len(vocab)} tokens saved to {path}[/green]")


def cmd_train(args: argparse.Namespace) -> None:
    run = _resolve_run(args)
    out = _out_dir(run.output_dir, "train")
    console.print(Panel(
        f"[bold]Training[/bold] {run.style}/{run.mode}, {run.variant}, n={run.patches}"
        f"{', temporal' if run.temporal else ''}\n"
        f"batch {run.batch_size}, epochs {run.epochs}, lr {run.lr:g}, seed {run.seed}",
        style="blue",
    ))
    start_time = time.time()
    config = run.model_dump(mode="json", exclude=EXECUTION_ONLY)

    if run.kfold:
        rows = train_kfold(run, out)
        folds = [(fold, evaluation) for fold, _, evaluation in rows]
        logs = {f"fold{fold}": result.log_path for fold, result, _ in rows}
        charts = [generate_loss_curve(logs, str(out / "training_loss.png"))]
        report_path = generate_report(
            "K-Fold Training", config, folds=folds, chart_paths=charts,
            output_path=out / "report.md", timestamp=not run.deterministic,
        )
        table = Table(title=f"{run.kfold}-Fold Results")
        table.add_column("Fold", style="bold")
        names = list(folds[0][1].metrics())
        for name in names:
            table.add_column(name)
        for fold, evaluation in folds:
            m = evaluation.metrics()
            table.add_row(str(fold), *[f"{m[k]:.4f}" for k in names])
        console.print(table)
        console.print(f"\n[dim]Full report: {report_path}[/dim]")
        return

    result = train_model(run, out)
    charts = [generate_loss_curve({run.variant: result.log_path}, str(out / "training_loss.png"))]

    table = Table(title="Training Summary")
    table.add_column("Metric", style="bold")
    table.add_column("Value")
    table.add_row("Epochs", str(len(result.history)))
    table.add_row("Adam steps", str(result.steps))
    table.add_row("Final loss", f"{result.history[-1].loss:.4f}")
    table.add_row("Best epoch", str(result.best_epoch))
    table.add_row("Best metric", f"{result.best_metric:.4f}")
    table.add_row("Checkpoint", result.checkpoint)
    table.add_row("Log", result.log_path)
    table.add_row("Chart", charts[0])
    if not run.deterministic:
        table.add_row("Total Time", f"{time.time() - start_time:.1f}s")
    console.print(table)


def cmd_eval(args: argparse.Namespace) -> None:
    trained = load_trained(args.checkpoint)
    saved = trained.run
    overrides = parse_overrides(args.set)
    for key, value in (("dataset", args.dataset), ("mode", args.mode), ("beam_width", args.beam_width),
                       ("output_dir", args.output_dir), ("deterministic", args.deterministic or None)):
        if value is not None:
            overrides[key] = value
    requested = with_overrides(saved, {**overrides, "eval_split": args.split})
    check_compatible(saved.model_dump(), requested)

    out = _out_dir(requested.output_dir, "eval")
    out.mkdir(parents=True, exist_ok=True)
    dataset = open_dataset(requested, args.split, trained.vocab)
    result = evaluate_model(trained.model, dataset, requested, args.split)

    with open(out / "eval.json", "w", encoding="utf-8") as f:
        json.dump({"config": trained.echo["run"], "checkpoint_epoch": trained.echo.get("epoch"), **result.model_dump()},
                  f, indent=2, ensure_ascii=False)
    metrics = result.metrics()
    with open(out / "eval.csv", "w", encoding="utf-8") as f:
        f.write(",".join(["split", *metrics]) + "\n")
        f.write(",".join([args.split, *[repr(v) for v in metrics.values()]]) + "\n")
    report_path = generate_report(
        "Evaluation", requested.model_dump(mode="json", exclude=EXECUTION_ONLY), evaluation=result,
        output_path=out / "report.md", timestamp=not requested.deterministic,
    )

    table = Table(title=f"Evaluation ({requested.mode}, {args.split} split, {len(dataset)} samples)")
    table.add_column("Metric", style="bold")
    table.add_column("Value")
    for key, value in metrics.items():
        table.add_row(key, f"{value:.4f}")
    console.print(table)
    console.print(f"\n[dim]Full report: {report_path}[/dim]")


def cmd_ablate(args: argparse.Namespace) -> None:
    run = _resolve_run(args)
    out = _out_dir(run.output_dir, "ablation")
    console.print(Panel(f"[bold]Ablation sweep[/bold] {run.style}/{run.mode}", style="blue"))
    rows, csv_path = run_ablation(run, out, args.temporal_sweep)
    metric = "accuracy" if run.mode == "classification" else "bleu_4"
    charts = generate_ablation_charts(rows, metric, str(out))
    report_path = generate_report(
        "Ablation", run.model_dump(mode="json", exclude=EXECUTION_ONLY), ablation=rows,
        chart_paths=charts, output_path=out / "report.md", timestamp=not run.deterministic,
    )

    table = Table(title=f"Ablation ({len(rows)} cells)")
    for col in ("Variant", "n²", "Temporal", "Final loss", metric, "Encoder params"):
        table.add_column(col)
    for r in rows:
        table.add_row(r.variant, str(r.visual_tokens), "yes" if r.temporal else "no",
                      f"{r.final_loss:.4f}", f"{r.metrics.get(metric, float('nan')):.4f}", f"{r.encoder_params:,}")
    console.print(table)
    console.print(f"\n[dim]Rows: {csv_path}\nFull report: {report_path}[/dim]")


def cmd_params(args: argparse.Namespace) -> None:
    run = _resolve_run(args)
    out = _out_dir(run.output_dir, "params")
    out.mkdir(parents=True, exist_ok=True)
    report = parameter_report(run)
    with open(out / "params.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, ensure_ascii=False)
    chart = generate_parameter_chart(report["tables"], str(out / "parameters.png"))
    report_path = generate_report(
        "Parameters", run.model_dump(mode="json", exclude=EXECUTION_ONLY), parameters=report,
        chart_paths=[chart], output_path=out / "report.md", timestamp=not run.deterministic,
    )

    tables = report["tables"]
    table = Table(title=f"Encoder parameters (d={run.d_model}, layers={run.num_layers}, N={run.max_seq_len})")
    table.add_column("Submodule", style="bold")
    table.add_column("baseline", justify="right")
    table.add_column("resmlp", justify="right")
    groups = [g for g in dict.fromkeys([*tables["baseline"], *tables["resmlp"]]) if g != "total"]
    for g in groups:
        table.add_row(g, f"{tables['baseline'].get(g, 0):,}", f"{tables['resmlp'].get(g, 0):,}")
    table.add_row("total", f"{tables['baseline']['total']:,}", f"{tables['resmlp']['total']:,}", style="bold")
    console.print(table)
    console.print(f"resmlp / baseline = {report['ratio']:.4f}")

    readings = Table(title="Cross-channel readings")
    for col in ("Reading", "Baseline", "ResMLP", "Reduction", "ResMLP smaller"):
        readings.add_column(col)
    for name, r in report["comparison"]["readings"].items():
        readings.add_row(name, f"{r['baseline_total']:,}", f"{r['resmlp_total']:,}",
                         f"{r['reduction'] * 100:.2f}%", "yes" if r["matches_reported_direction"] else "no")
    console.print(readings)
    ref = report["comparison"]["reported"]
    console.print(
        f"[yellow]Reference: {ref['resmlp_total'] / 1e6:.1f}M vs {ref['baseline_total'] / 1e6:.1f}M "
        f"({ref['reduction'] * 100:.2f}% fewer), not reproducible from the stated configuration[/yellow]"
    )
    console.print(f"\n[dim]Full report: {report_path}[/dim]")


def cmd_ask(args: argparse.Namespace) -> None:
    trained = load_trained(args.checkpoint)
    if len(args.image) not in ((1, 3) if trained.run.temporal else (1,)):
        raise ContractError(
            f"{'temporal' if trained.run.temporal else 'single-frame'} checkpoint cannot take {len(args.image)} frames"
        )
    frames = [load_image(p) for p in args.image]
    if trained.run.temporal and len(frames) == 1:
        frames = frames * 3

    if trained.run.mode == "classification":
        answers = answer_label(frames, args.question, trained.model, trained.vocab, trained.labels, args.top_k)
        table = Table(title=args.question)
        table.add_column("Answer", style="bold")
        table.add_column("Probability", justify="right")
        for label, prob in answers:
            table.add_row(label, f"{prob:.6f}")
        console.print(table)
        return

    gen = trained.run.generation()
    if args.beam_width:
        gen = gen.model_copy(update={"beam_width": args.beam_width})
    console.print(answer_sentence(frames, args.question, trained.model, trained.vocab, gen))


COMMANDS = {
    "datagen": cmd_datagen,
    "tokenizer-train": cmd_tokenizer_train,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "params": cmd_params,
    "ask": cmd_ask,
}


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except VQAError as exc:
        print(exc.one_line(), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
