"""
Figures for pruning runs: loss curves, ablation bars and neighborhood grids.
"""

from typing import Dict, Any, List, Sequence
from pathlib import Path
import logging
import math

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

logger = logging.getLogger(__name__)


class ReportVisualizer:
    """
    Generate figures for run reports.
    """

    def __init__(self, theme: str = "light"):
        """Initialize visualizer with theme."""
        self.theme = theme
        self._setup_theme()

    def _setup_theme(self):
        """Setup theme colors and styles."""
        self.colors = {
            "light": {
                "primary": "#2563eb",
                "secondary": "#7c3aed",
                "success": "#059669",
                "warning": "#d97706",
                "error": "#dc2626",
                "background": "#ffffff",
                "text": "#1f2937"
            },
            "dark": {
                "primary": "#3b82f6",
                "secondary": "#8b5cf6",
                "success": "#10b981",
                "warning": "#f59e0b",
                "error": "#ef4444",
                "background": "#1f2937",
                "text": "#f3f4f6"
            }
        }[self.theme]

    def _style(self, fig: go.Figure, **layout: Any) -> go.Figure:
        fig.update_layout(
            paper_bgcolor=self.colors["background"],
            plot_bgcolor=self.colors["background"],
            font=dict(color=self.colors["text"]),
            **layout
        )
        return fig

    def create_loss_curves(self, histories: Dict[str, pd.DataFrame]) -> go.Figure:
        """
        One panel per pruning run with loss_G, loss_D and the resource loss.

        Args:
            histories: Run label -> pruning history with step, loss_G, loss_D, resource

        Returns:
            Plotly figure; the resource loss is rescaled to [0, 1] per panel
        """
        labels = list(histories)
        cols = min(len(labels), 3) or 1
        rows = max(math.ceil(len(labels) / cols), 1)
        fig = make_subplots(rows=rows, cols=cols, subplot_titles=labels or None)

        for i, label in enumerate(labels):
            frame = histories[label]
            row, col = i // cols + 1, i % cols + 1
            first = i == 0
            fig.add_trace(
                go.Scatter(x=frame["step"], y=frame["loss_G"], mode="lines", name="loss_G",
                           line=dict(color=self.colors["primary"]), showlegend=first, legendgroup="G"),
                row=row, col=col
            )
            fig.add_trace(
                go.Scatter(x=frame["step"], y=frame["loss_D"], mode="lines", name="loss_D",
                           line=dict(color=self.colors["secondary"]), showlegend=first, legendgroup="D"),
                row=row, col=col
            )
            fig.add_trace(
                go.Scatter(x=frame["step"], y=normalize_unit(frame["resource"]), mode="lines",
                           name="R (normalized)", line=dict(color=self.colors["warning"], dash="dot"),
                           showlegend=first, legendgroup="R"),
                row=row, col=col
            )

        return self._style(fig, title="Pruning losses", height=320 * rows, width=420 * cols)

    def create_ablation_chart(self, table: pd.DataFrame) -> go.Figure:
        """Fréchet proxy and generator compression per ablation row."""
        fig = make_subplots(rows=1, cols=2, subplot_titles=("Fréchet proxy", "Generator compression"))
        fig.add_trace(
            go.Bar(x=table["variant"], y=table["frechet"], name="Fréchet proxy",
                   marker_color=self.colors["primary"]),
            row=1, col=1
        )
        fig.add_trace(
            go.Bar(x=table["variant"], y=table["compression_ratio"], name="Compression ratio",
                   marker_color=self.colors["success"]),
            row=1, col=2
        )
        return self._style(fig, title="Ablation", height=420, width=1000, showlegend=False)

    def create_neighborhood_grid(
        self,
        centers: Sequence[int],
        rows: Dict[str, Dict[int, List[int]]],
        images: Dict[str, Dict[int, np.ndarray]],
        title: str = "Neighborhoods",
    ) -> go.Figure:
        """
        Center plus neighbors, one grid row per (center, index) pair.

        Args:
            centers: Center ids to show
            rows: Index label -> center id -> neighbor ids
            images: Index label -> sample id -> H x W x C image in [0, 1]
            title: Figure title

        Returns:
            Plotly figure of image tiles
        """
        labels = list(rows)
        k = max((len(n) for table in rows.values() for n in table.values()), default=0)
        titles = []
        for center in centers:
            for label in labels:
                titles.extend([f"{label} #{center}"] + [""] * k)
        fig = make_subplots(rows=max(len(centers) * len(labels), 1), cols=k + 1, subplot_titles=titles or None,
                            horizontal_spacing=0.01, vertical_spacing=0.04)
        r = 1
        for center in centers:
            for label in labels:
                ids = [center] + rows[label].get(center, [])
                for c, sample_id in enumerate(ids):
                    tile = np.clip(images[label][sample_id] * 255.0, 0, 255).astype(np.uint8)
                    fig.add_trace(go.Image(z=tile), row=r, col=c + 1)
                r += 1
        fig.update_xaxes(visible=False)
        fig.update_yaxes(visible=False)
        return self._style(fig, title=title, height=110 * max(r - 1, 1) + 80, width=110 * (k + 1) + 80)

    def save_figure(self, fig: go.Figure, base: Path) -> List[Path]:
        """Write ``<base>.html`` and, when the static engine is available, ``<base>.svg``."""
        base = Path(base)
        base.parent.mkdir(parents=True, exist_ok=True)
        written = [base.with_suffix(".html")]
        fig.write_html(written[0], include_plotlyjs="cdn")
        try:
            fig.write_image(base.with_suffix(".svg"))
            written.append(base.with_suffix(".svg"))
        except Exception as e:
            logger.warning(f"Static export of {base.name} skipped: {e}")
        return written


def normalize_unit(values: pd.Series) -> pd.Series:
    """Rescale to [0, 1]; a constant series maps to zeros."""
    lo, hi = float(values.min()), float(values.max())
    if not math.isfinite(lo) or hi - lo <= 0:
        return values * 0.0
    return (values - lo) / (hi - lo)
