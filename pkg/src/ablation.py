"""
Patch-grid / variant ablation sweep.

Trains and evaluates one model per cell of n ∈ {1..5} (n² visual tokens)
× variant ∈ {baseline, resmlp}; sentence-mode sweeps repeat the grid with
temporal 3-frame clips. Each finished cell is appended to ``ablation.csv``
immediately, so an interrupted sweep keeps what it has.
"""

import csv
import math
from pathlib import Path

from pydantic import BaseModel
from rich.console import Console

from .config import PATCH_GRIDS, RunConfig, default_output_root
from .data import label_universe
from .encoder import count_parameters, parameter_table, reference_parameter_comparison
from .trainer import load_trained, metric_names, train_model

console = Console()

VARIANTS = ("baseline", "resmlp")


class AblationCell(BaseModel):
    variant: str
    patches: int
    temporal: bool

    @property
    def name(self) -> str:
        return f"{self.variant}_n{self.patches}{'_t3' if self.temporal else ''}"


class AblationRow(BaseModel):
    variant: str
    patches: int
    visual_tokens: int
    temporal: bool
    mode: str
    epochs: int
    steps: int
    final_loss: float
    best_epoch: int
    metrics: dict[str, float]
    encoder_params: int
    encoder_params_closed_form: int
    model_params: int
    checkpoint: str

    @property
    def params_consistent(self) -> bool:
        return self.encoder_params == self.encoder_params_closed_form

    @property
    def losses_finite(self) -> bool:
        return math.isfinite(self.final_loss)

    def csv_row(self, names: list[str]) -> list:
        return [
            self.variant,
            self.patches,
            self.visual_tokens,
            int(self.temporal),
            self.mode,
            self.epochs,
            self.steps,
            repr(self.final_loss),
            self.best_epoch,
            *[repr(self.metrics.get(k, float("nan"))) for k in names],
            self.encoder_params,
            self.encoder_params_closed_form,
            self.model_params,
        ]


def csv_header(names: list[str]) -> list[str]:
    return [
        "variant",
        "patches",
        "visual_tokens",
        "temporal",
        "mode",
        "epochs",
        "steps",
        "final_loss",
        "best_epoch",
        *names,
        "encoder_params",
        "encoder_params_closed_form",
        "model_params",
    ]


def ablation_cells(base: RunConfig, temporal: bool | None = None) -> list[AblationCell]:
    """
    Cells of the sweep in run order.

    Args:
        base: Run whose mode picks the default temporal behaviour.
        temporal: Add temporal rows; defaults to True in sentence mode only.
    """
    if temporal is None:
        temporal = base.mode == "sentence"
    regimes = [False, True] if temporal else [False]
    return [
        AblationCell(variant=v, patches=n, temporal=t) for t in regimes for v in VARIANTS for n in PATCH_GRIDS
    ]


def run_ablation(
    base: RunConfig, out_dir: str | Path | None = None, temporal: bool | None = None
) -> tuple[list[AblationRow], Path]:
    """
    Run every cell and write ``ablation.csv`` under ``out_dir``.

    Returns:
        (rows, csv path). Cell checkpoints and logs go to ``cells/<name>/``.
    """
    out = Path(out_dir or base.output_dir or default_output_root() / "ablation")
    out.mkdir(parents=True, exist_ok=True)
    cells = ablation_cells(base, temporal)
    names = metric_names(base.mode)
    csv_path = out / "ablation.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        csv.writer(f, lineterminator="\n").writerow(csv_header(names))

    console.print(f"\n[bold]Ablation: {len(cells)} cells ({base.mode}, {base.style})[/bold]")
    rows: list[AblationRow] = []
    for i, cell in enumerate(cells, 1):
        console.print(f"[bold]Cell {i}/{len(cells)}: {cell.name}[/bold]")
        run = base.model_copy(update={"variant": cell.variant, "patches": cell.patches, "temporal": cell.temporal})
        result = train_model(run, out / "cells" / cell.name)
        best = next(r for r in result.history if r.epoch == result.best_epoch)
        model = load_trained(result.checkpoint).model

        row = AblationRow(
            variant=cell.variant,
            patches=cell.patches,
            visual_tokens=cell.patches**2,
            temporal=cell.temporal,
            mode=run.mode,
            epochs=len(result.history),
            steps=result.steps,
            final_loss=result.history[-1].loss,
            best_epoch=result.best_epoch,
            metrics=best.metrics,
            encoder_params=count_parameters(model.encoder)["total"],
            encoder_params_closed_form=parameter_table(model.encoder.config)["total"],
            model_params=model.num_parameters(),
            checkpoint=result.checkpoint,
        )
        if not row.params_consistent:
            console.print(
                f"[yellow]{cell.name}: counted {row.encoder_params} encoder parameters, "
                f"closed form says {row.encoder_params_closed_form}[/yellow]"
            )
        rows.append(row)
        with open(csv_path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(row.csv_row(names))

    console.print(f"[green]Ablation rows saved to {csv_path}[/green]")
    return rows, csv_path


def load_ablation(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def parameter_report(run: RunConfig) -> dict:
    """
    Closed-form encoder parameter tables for both variants at ``run``'s size.

    No weights are built. The classifier head is sized by the style's label
    universe in classification mode and omitted in sentence mode.
    """
    num_classes = len(label_universe(run.style)) if run.mode == "classification" else None
    encoder = run.to_model_config(run.vocab_size, num_classes).encoder
    tables = {v: parameter_table(encoder.model_copy(update={"variant": v})) for v in VARIANTS}
    return {
        "encoder": encoder.model_dump(),
        "tables": tables,
        "ratio": tables["resmlp"]["total"] / tables["baseline"]["total"],
        "per_layer": {
            "baseline_ffn_tail": tables["baseline"]["layers.ffn"] // encoder.num_layers,
            "resmlp_cross_token": tables["resmlp"]["layers.cross_token"] // encoder.num_layers,
            "resmlp_cross_channel": tables["resmlp"]["layers.cross_channel"] // encoder.num_layers,
        },
        "comparison": reference_parameter_comparison(encoder),
    }
