"""
Run report: loss curves, compression and ablation tables, neighborhood grids.

Reads the artifacts recorded in ``stages.json`` and writes everything under
``<run_dir>/report/`` (or the directory given). Pruning histories and the
finalize report are required; evaluation and ablation outputs are included
when present and listed as absent otherwise.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import json
import logging

import numpy as np
import pandas as pd
import yaml

from ..core.manifold import NeighborhoodIndex
from ..core.pruneloop import ABLATION_LADDER
from ..core.run_manager import RunManager
from ..templates import ReportTemplates
from ..utils.exceptions import ReportError
from ..utils.monitoring import monitor_performance
from .visualizations import ReportVisualizer

logger = logging.getLogger(__name__)

TOGGLES = ["prune_D", "use_agents", "exchange_feedback", "manifold_real_set", "use_kd"]
NEIGHBORHOOD_CENTERS = 4


@dataclass
class ReportInputs:
    histories: Dict[str, pd.DataFrame]
    finalize: Dict[str, Any]
    config: Dict[str, Any]
    metrics: Optional[Dict[str, Any]] = None
    ablation: Optional[pd.DataFrame] = None
    eval_dir: Optional[Path] = None
    absent: List[str] = field(default_factory=list)


def _read_json(path: Path) -> Dict[str, Any]:
    with open(path) as f:
        return json.load(f)


def _panel_label(record: Dict[str, Any], taken: Dict[str, pd.DataFrame]) -> str:
    label = f"λ1={record['metadata'].get('lambda1', '?')}"
    if label in taken:
        label = f"{label} [{record['path']}]"
    return label


def collect_inputs(manager: RunManager) -> ReportInputs:
    """Gather report inputs; raises ReportError naming every absent required input."""
    missing: List[str] = []
    histories: Dict[str, pd.DataFrame] = {}
    prune_versions = manager.versions("prune")
    if not prune_versions:
        missing.append("prune/history.csv")
    for record in prune_versions:
        path = manager.run_dir / record["path"] / "history.csv"
        if not path.exists():
            missing.append(f"{record['path']}/history.csv")
            continue
        histories[_panel_label(record, histories)] = pd.read_csv(path)

    finalize_path = manager.latest("finalize") / "report.json" if manager.has("finalize") else None
    if finalize_path is None or not finalize_path.exists():
        missing.append("finalize/report.json")
    if missing:
        raise ReportError(f"report inputs missing: {', '.join(missing)}", missing=missing,
                          details={"run_dir": str(manager.run_dir)})

    config = yaml.safe_load((manager.latest("prune") / "config.yaml").read_text())
    inputs = ReportInputs(histories=histories, finalize=_read_json(finalize_path), config=config)
    if manager.has("eval"):
        inputs.eval_dir = manager.latest("eval")
        inputs.metrics = _read_json(inputs.eval_dir / "metrics.json")
    else:
        inputs.absent.append("eval")
    if manager.has("ablate"):
        inputs.ablation = pd.read_csv(manager.latest("ablate") / "ablation.csv")
    else:
        inputs.absent.append("ablate")
    return inputs


def summarize_ablation(table: pd.DataFrame) -> pd.DataFrame:
    """Median over seeds per variant, in ladder order."""
    if table.empty:
        return table
    grouped = table.groupby("variant", sort=False)
    summary = grouped[["compression_ratio", "frechet", "l1"]].median()
    for toggle in TOGGLES:
        summary[toggle] = grouped[toggle].first().astype(bool)
    summary["seeds"] = grouped["seed"].nunique()
    ladder = [name for name, _ in ABLATION_LADDER]
    order = [v for v in ladder if v in summary.index] + [v for v in summary.index if v not in ladder]
    return summary.loc[order].reset_index()


def single_run_row(inputs: ReportInputs) -> pd.DataFrame:
    """Ablation table for a run without ``ablate``: one row for the configured toggles."""
    toggles = {t: bool(inputs.config["ablation"][t]) for t in TOGGLES}
    variant = next((name for name, row in ABLATION_LADDER if row == toggles), "Custom")
    quality: Dict[str, Any] = {"frechet": None, "l1": None}
    if inputs.metrics is not None:
        generators = inputs.metrics["generators"]
        best = generators.get("finetuned") or generators.get("pruned")
        if best is not None:
            quality = {"frechet": best["frechet"], "l1": best["l1"]}
    row = {
        "variant": variant,
        "compression_ratio": inputs.finalize["generator"]["compression_ratio"],
        **quality,
        **toggles,
        "seeds": 1,
    }
    return pd.DataFrame([row])


def _as_image(array: np.ndarray) -> np.ndarray:
    """C x H x W in [-1, 1] to H x W x C in [0, 1]."""
    return np.clip((np.transpose(array, (1, 2, 0)) + 1.0) / 2.0, 0.0, 1.0)


def neighborhood_table(original: NeighborhoodIndex, pruned: NeighborhoodIndex) -> pd.DataFrame:
    rows = []
    for center in original.ids:
        kept = set(original.neighbor_ids(center)) & set(pruned.neighbor_ids(center))
        rows.append({
            "center": center,
            "original": " ".join(map(str, original.neighbor_ids(center))),
            "pruned": " ".join(map(str, pruned.neighbor_ids(center))),
            "overlap": len(kept) / original.k,
        })
    return pd.DataFrame(rows)


@monitor_performance("emit_report")
def emit_report(
    run_dir: Union[str, Path],
    output_dir: Optional[Union[str, Path]] = None,
    theme: str = "light",
) -> Dict[str, Any]:
    """
    Write figures and tables for a run.

    Args:
        run_dir: Run directory holding ``stages.json``
        output_dir: Destination; defaults to ``<run_dir>/report``
        theme: Figure theme, ``light`` or ``dark``

    Returns:
        Manifest with the written files and the inputs that were absent
    """
    manager = RunManager(run_dir)
    inputs = collect_inputs(manager)
    out = Path(output_dir) if output_dir is not None else manager.run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    templates = ReportTemplates()
    viz = ReportVisualizer(theme)
    written: List[Path] = []

    def write(name: str, text: str) -> None:
        (out / name).write_text(text)
        written.append(out / name)

    written += viz.save_figure(viz.create_loss_curves(inputs.histories), out / "loss_curves")

    compression = {role: inputs.finalize[role] for role in ("generator", "discriminator")}
    pd.DataFrame([
        {"model": role, **{k: rep[k] for k in ("macs", "original_macs", "compression_ratio", "active_fraction")}}
        for role, rep in compression.items()
    ]).to_csv(out / "compression.csv", index=False)
    written.append(out / "compression.csv")
    write("survival.md", templates.render(
        "survival.md", survival={role: rep["survival"] for role, rep in compression.items()}
    ))

    ablation = summarize_ablation(inputs.ablation) if inputs.ablation is not None else single_run_row(inputs)
    ablation.to_csv(out / "ablation.csv", index=False)
    written.append(out / "ablation.csv")
    write("ablation.md", templates.render("ablation.md", rows=ablation.to_dict("records")))
    written += viz.save_figure(viz.create_ablation_chart(ablation), out / "ablation")

    if inputs.eval_dir is not None and (inputs.eval_dir / "pruned_index").exists():
        original = NeighborhoodIndex.load(inputs.eval_dir / "original_index")
        pruned = NeighborhoodIndex.load(inputs.eval_dir / "pruned_index")
        table = neighborhood_table(original, pruned)
        table.to_csv(out / "neighborhoods.csv", index=False)
        written.append(out / "neighborhoods.csv")

        arrays = np.load(inputs.eval_dir / "predictions.npz")
        ids = arrays["ids"].tolist()
        images = {
            label: {sample_id: _as_image(arrays[label][i]) for i, sample_id in enumerate(ids)}
            for label in ("original", "pruned")
        }
        centers = sorted(original.ids)[:NEIGHBORHOOD_CENTERS]
        fig = viz.create_neighborhood_grid(
            centers,
            {"original": original.as_id_lists(), "pruned": pruned.as_id_lists()},
            images,
            title=f"Neighborhoods (mean overlap {table['overlap'].mean():.3f})",
        )
        written += viz.save_figure(fig, out / "neighborhoods")
    elif "eval" not in inputs.absent:
        inputs.absent.append("eval/pruned_index")

    generator = compression["generator"]
    write("summary.md", templates.render(
        "summary.md",
        seed=inputs.config["seed"],
        flavor=inputs.config["flavor"],
        variant=single_run_row(inputs)["variant"].iloc[0],
        compression=compression,
        budget=generator.get("budget"),
        within_budget=generator.get("within_budget", False),
        stability=inputs.finalize.get("stability", {}),
        metrics=inputs.metrics,
        absent=inputs.absent,
    ))

    manifest = {"files": sorted(p.name for p in written), "absent": inputs.absent}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Report written to {out}", extra={"files": len(written), "absent": inputs.absent})
    return manifest
