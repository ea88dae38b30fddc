"""
Markdown Report Generator.

Builds ``report.md`` from section functions and writes the raw data next to
it as ``report_data.json``. Reports cover evaluation runs, ablation sweeps
and parameter accounting; a run's config echo is always included.
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Any

from .ablation import AblationRow
from .trainer import EvalResult, metric_names


def generate_report(
    title: str,
    config: dict[str, Any],
    evaluation: EvalResult | None = None,
    ablation: list[AblationRow] | None = None,
    parameters: dict[str, Any] | None = None,
    folds: list[tuple[int, EvalResult]] | None = None,
    chart_paths: list[str] | None = None,
    output_path: str | Path = "results/reports/report.md",
    timestamp: bool = True,
) -> str:
    """
    Generate a Markdown report.

    Args:
        title: Report heading (e.g. "Evaluation", "Ablation").
        config: Config echo of the run being reported.
        evaluation: Evaluation result to summarize.
        ablation: Ablation rows to tabulate.
        parameters: Output of ``parameter_report``.
        folds: Per-fold evaluation results of a k-fold study.
        chart_paths: Chart image paths to embed.
        output_path: Path to save the report.
        timestamp: Include the generation time; off for byte-stable reports.

    Returns:
        Path to the saved report
    """
    output_path = str(output_path)
    Path(output_path).parent.mkdir(parents=True, exist_ok=True)

    sections = []
    sections.append(_header(title, timestamp))
    if evaluation is not None:
        sections.append(_evaluation_summary(evaluation))
        sections.append(_per_class(evaluation))
        sections.append(_sample_predictions(evaluation))
    if folds:
        sections.append(_fold_table(folds))
    if ablation:
        sections.append(_ablation_table(ablation))
    if parameters:
        sections.append(_parameter_section(parameters))
    sections.append(_charts_section(chart_paths))
    sections.append(_config_section(config))

    report = "\n\n".join(s for s in sections if s) + "\n"

    with open(output_path, "w", encoding="utf-8") as f:
        f.write(report)

    # Also save raw data as JSON
    json_path = output_path.replace(".md", "_data.json")
    raw_data: dict[str, Any] = {"title": title, "config": config}
    if evaluation is not None:
        raw_data["evaluation"] = evaluation.model_dump()
    if folds:
        raw_data["folds"] = [{"fold": k, **r.model_dump()} for k, r in folds]
    if ablation:
        raw_data["ablation"] = [r.model_dump() for r in ablation]
    if parameters:
        raw_data["parameters"] = parameters
    if timestamp:
        raw_data["generated_at"] = datetime.now().isoformat()
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(raw_data, f, indent=2, ensure_ascii=False, default=str)

    return output_path


def _header(title: str, timestamp: bool) -> str:
    lines = [f"# Surgical VQA Report: {title}", ""]
    if timestamp:
        lines.append(f"**Generated:** {datetime.now().strftime('%Y-%m-%d %H:%M')}")
    lines.append("")
    lines.append("---")
    return "\n".join(lines)


def _evaluation_summary(result: EvalResult) -> str:
    lines = ["## Summary", ""]
    lines.append(f"**Mode:** {result.mode}  ")
    lines.append(f"**Split:** {result.split}  ")
    lines.append(f"**Samples:** {len(result.predictions)}")
    lines.append("")
    metrics = result.metrics()
    lines.append("| " + " | ".join(_metric_title(k) for k in metrics) + " |")
    lines.append("| " + " | ".join(["---"] * len(metrics)) + " |")
    lines.append("| " + " | ".join(f"{v:.4f}" for v in metrics.values()) + " |")
    if result.scores is not None:
        lines.append("")
        lines.append(f"METEOR variant: {result.scores.meteor_variant} (no stemming or synonym matching).")
    if result.classification is not None:
        lines.append("")
        lines.append(f"Recall and F-score are {result.classification.average}-averaged over classes present in the labels.")
    return "\n".join(lines)


def _per_class(result: EvalResult) -> str:
    if result.classification is None:
        return ""
    lines = ["## Per-Class Results", ""]
    lines.append("| Class | Support | Precision | Recall | F-score |")
    lines.append("| --- | --- | --- | --- | --- |")
    for label, counts in result.classification.per_class.items():
        if counts.support == 0 and counts.fp == 0:
            continue
        lines.append(
            f"| {label} | {counts.support} | {counts.precision:.3f} | {counts.recall:.3f} | {counts.f_score:.3f} |"
        )
    return "\n".join(lines)


def _sample_predictions(result: EvalResult, limit: int = 10) -> str:
    wrong = [p for p in result.predictions if p["prediction"] != p["answer"]]
    lines = ["## Sample Errors", ""]
    if not wrong:
        lines.append("Every prediction matches its reference.")
        return "\n".join(lines)
    lines.append(f"{len(wrong)} of {len(result.predictions)} predictions differ from the reference; first {min(limit, len(wrong))}:")
    lines.append("")
    lines.append("| Seq | Frame | Question | Reference | Prediction |")
    lines.append("| --- | --- | --- | --- | --- |")
    for p in wrong[:limit]:
        lines.append(f"| {p['sequence_id']} | {p['frame_id']} | {p['question']} | {p['answer']} | {p['prediction']} |")
    return "\n".join(lines)


def _fold_table(folds: list[tuple[int, EvalResult]]) -> str:
    names = list(folds[0][1].metrics())
    lines = ["## K-Fold Results", ""]
    lines.append("| Fold | " + " | ".join(_metric_title(k) for k in names) + " |")
    lines.append("| --- | " + " | ".join(["---"] * len(names)) + " |")
    for fold, result in folds:
        m = result.metrics()
        lines.append(f"| {fold} | " + " | ".join(f"{m[k]:.4f}" for k in names) + " |")
    means = {k: sum(r.metrics()[k] for _, r in folds) / len(folds) for k in names}
    lines.append("| **mean** | " + " | ".join(f"**{means[k]:.4f}**" for k in names) + " |")
    return "\n".join(lines)


def _ablation_table(rows: list[AblationRow]) -> str:
    names = metric_names(rows[0].mode)
    lines = ["## Ablation", ""]
    headers = ["Variant", "n²", "Temporal", "Final loss", *[_metric_title(k) for k in names], "Encoder params"]
    lines.append("| " + " | ".join(headers) + " |")
    lines.append("| " + " | ".join(["---"] * len(headers)) + " |")
    for r in rows:
        cells = [r.variant, str(r.visual_tokens), "yes" if r.temporal else "no", f"{r.final_loss:.4f}"]
        cells += [f"{r.metrics.get(k, float('nan')):.4f}" for k in names]
        cells.append(f"{r.encoder_params:,}")
        lines.append("| " + " | ".join(cells) + " |")

    inconsistent = [r for r in rows if not r.params_consistent]
    lines.append("")
    if inconsistent:
        lines.append(f"**Warning:** {len(inconsistent)} rows disagree with the closed-form parameter count.")
    else:
        lines.append("All rows' parameter counts match the closed-form formulas.")
    return "\n".join(lines)


def _parameter_section(parameters: dict[str, Any]) -> str:
    lines = ["## Parameter Accounting", ""]
    tables = parameters["tables"]
    variants = list(tables)
    groups = [g for g in dict.fromkeys(g for t in tables.values() for g in t) if g != "total"]
    lines.append("| Submodule | " + " | ".join(variants) + " |")
    lines.append("| --- | " + " | ".join(["---"] * len(variants)) + " |")
    for g in groups:
        lines.append(f"| {g} | " + " | ".join(f"{tables[v].get(g, 0):,}" for v in variants) + " |")
    lines.append("| **total** | " + " | ".join(f"**{tables[v]['total']:,}**" for v in variants) + " |")

    comparison = parameters["comparison"]
    lines.append("")
    lines.append("### Cross-channel readings")
    lines.append("")
    lines.append("| Reading | Baseline | ResMLP | Reduction | ResMLP smaller |")
    lines.append("| --- | --- | --- | --- | --- |")
    for name, r in comparison["readings"].items():
        lines.append(
            f"| {name} | {r['baseline_total']:,} | {r['resmlp_total']:,} | "
            f"{r['reduction'] * 100:.2f}% | {'yes' if r['matches_reported_direction'] else 'no'} |"
        )
    ref = comparison["reported"]
    lines.append("")
    lines.append(
        f"Reference figures: ResMLP {ref['resmlp_total'] / 1e6:.1f}M vs baseline {ref['baseline_total'] / 1e6:.1f}M "
        f"({ref['reduction'] * 100:.2f}% fewer). These are not reproducible from the stated configuration."
    )
    return "\n".join(lines)


def _charts_section(chart_paths: list[str] | None) -> str:
    if not chart_paths:
        return ""

    lines = ["## Visualizations", ""]

    for path in chart_paths:
        filename = Path(path).name
        title = (
            filename.replace(".png", "")
            .replace("_", " ")
            .title()
        )
        # Use relative path from report location
        lines.append(f"### {title}")
        lines.append("")
        lines.append(f"![{title}]({filename})")
        lines.append("")

    return "\n".join(lines)


def _config_section(config: dict[str, Any]) -> str:
    lines = ["## Configuration", "", "```yaml"]
    for key, value in config.items():
        lines.append(f"{key}: {json.dumps(value, ensure_ascii=False)}")
    lines.append("```")
    return "\n".join(lines)


def _metric_title(key: str) -> str:
    if key.startswith("bleu_"):
        return f"BLEU-{key[5:]}"
    return {"cider": "CIDEr", "meteor": "METEOR", "f_score": "F-score"}.get(key, key.title())
