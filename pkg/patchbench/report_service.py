"""
Report Service - figures και πίνακες.

Κάθε figure γράφεται μαζί με ένα data sidecar (JSON και, όπου έχει
νόημα, CSV). Το sidecar είναι byte-stable: ίδια δεδομένα → ίδια bytes.
Από το sidecar το figure ξαναφτιάχνεται με render_from_spec χωρίς
να ξανατρέξει κανένας υπολογισμός.
"""

import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from matplotlib.figure import Figure
from matplotlib.lines import Line2D
from matplotlib.patches import Rectangle
from pydantic import BaseModel, Field

from .analysis_service import SCOPES, EmbeddingPoint, HistogramPanel, HistogramStats
from .errors import InvalidArgumentError
from .evaluation_service import CompatibilityMatrix

logger = logging.getLogger(__name__)

# Configuration
HEATMAP_CMAP = "magma"
ROWWISE_LABEL = "rowwise mean"
MIN_MARKER = 20.0
MAX_MARKER = 200.0
GROUP_MARKERS = {"OBJECTNESS_V7": "o", "CLASSMAX": "s", "DUALHEAD_V10": "^", "none": "X"}
STATS_COLUMNS = ["Channel", "Source", "Mean±Std", "Median", "Skewness", "Kurtosis"]
DPI = 120


class FigureSpec(BaseModel):
    """Τι figure, από ποιο data sidecar, σε ποιο αρχείο."""

    kind: Literal["heatmap", "scatter", "histogram_grid", "stats_table"]
    data: Path
    output: Path
    format: Literal["png", "svg", "csv"] = "png"
    options: Dict[str, object] = Field(default_factory=dict)


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _save(fig: Figure, output: Path, fmt: str) -> Path:
    output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output, format=fmt, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"💾 Figure saved to {output}")
    return output


def _write_spec(spec: FigureSpec) -> None:
    _write_json(spec.output.with_suffix(".figure.json"), json.loads(spec.model_dump_json()))


# ============================================================
# Heatmap
# ============================================================

def heatmap_table(matrix: CompatibilityMatrix) -> pd.DataFrame:
    """Rowwise mean, baselines, sources - σε αυτή τη σειρά από αριστερά."""
    columns = [ROWWISE_LABEL] + matrix.labels
    rows = [[mean] + row for mean, row in zip(matrix.rowwise_mean, matrix.cells)]
    frame = pd.DataFrame(rows, index=matrix.eval_labels, columns=columns, dtype=float)
    frame.index.name = "evaluator"
    return frame


def build_heatmap_figure(matrix: CompatibilityMatrix, title: Optional[str] = None) -> Figure:
    frame = heatmap_table(matrix)
    values = np.ma.masked_invalid(frame.to_numpy(dtype=float))

    n_rows, n_cols = values.shape
    missing = np.ma.getmaskarray(values)
    fig, ax = plt.subplots(figsize=(1.0 + 0.9 * n_cols, 1.0 + 0.6 * n_rows))
    finite = values.compressed()
    vmin, vmax = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if vmin == vmax:
        vmin, vmax = vmin - 0.5, vmax + 0.5
    image = ax.imshow(values, cmap=HEATMAP_CMAP, vmin=vmin, vmax=vmax, aspect="auto")

    for i in range(n_rows):
        for j in range(n_cols):
            if missing[i, j]:
                ax.add_patch(Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, hatch="///", edgecolor="gray"))
                ax.text(j, i, "n/a", ha="center", va="center", fontsize=7, color="gray")
            else:
                v = float(values[i, j])
                shade = "black" if (v - vmin) / (vmax - vmin) > 0.6 else "white"
                ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7, color=shade)

    # Χωρίζουμε το μπλοκ rowwise mean + baselines από τις sources
    ax.axvline(len(matrix.baseline_labels) + 0.5, color="white", linewidth=2)
    ax.set_xticks(range(n_cols), labels=list(frame.columns), rotation=60, ha="right")
    ax.set_yticks(range(n_rows), labels=list(frame.index))
    ax.set_xlabel("patch source")
    ax.set_ylabel("evaluated network")
    if title:
        ax.set_title(title)
    fig.colorbar(image, ax=ax, label="mAP drop")
    return fig


def render_heatmap(matrix: CompatibilityMatrix, output: Union[str, Path], fmt: str = "png", title: Optional[str] = None) -> Path:
    """
    Heatmap του compatibility matrix + CSV και JSON sidecars.

    Missing κελιά εμφανίζονται με hatch και "n/a".
    """
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    heatmap_table(matrix).to_csv(output.with_suffix(".csv"))
    data = _write_json(output.with_suffix(".json"), matrix.to_dict())
    _write_spec(FigureSpec(kind="heatmap", data=data, output=output, format=fmt, options={"title": title}))
    return _save(build_heatmap_figure(matrix, title), output, fmt)


def read_heatmap_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, index_col=0, float_precision="round_trip")


# ============================================================
# t-SNE scatter
# ============================================================

def marker_area(drop: float, min_marker: float = MIN_MARKER, max_marker: float = MAX_MARKER) -> float:
    """Affine στο drop, με clip στο [0, 1]."""
    return min_marker + (max_marker - min_marker) * float(np.clip(drop, 0.0, 1.0))


def marker_for_group(group: str) -> str:
    return GROUP_MARKERS.get(group, "D")


def build_tsne_figure(
    points: Sequence[EmbeddingPoint],
    min_marker: float = MIN_MARKER,
    max_marker: float = MAX_MARKER,
    title: Optional[str] = None,
) -> Figure:
    if not points:
        raise InvalidArgumentError("scatter needs at least one point")

    sources = sorted({p.source_model for p in points})
    groups = sorted({p.arch_group for p in points})
    palette = plt.get_cmap("tab20" if len(sources) > 10 else "tab10")
    colors = {s: palette(i % palette.N) for i, s in enumerate(sources)}

    fig, ax = plt.subplots(figsize=(7, 6))
    for source in sources:
        for group in groups:
            members = [p for p in points if p.source_model == source and p.arch_group == group]
            if not members:
                continue
            ax.scatter(
                [p.x for p in members],
                [p.y for p in members],
                s=[marker_area(p.map_drop, min_marker, max_marker) for p in members],
                color=colors[source],
                marker=marker_for_group(group),
                edgecolors="black",
                linewidths=0.4,
                alpha=0.85,
            )

    group_handles = [
        Line2D([], [], linestyle="", marker=marker_for_group(g), color="gray", label=g) for g in groups
    ]
    group_legend = ax.legend(handles=group_handles, title="architecture", loc="lower right", fontsize=7)
    ax.add_artist(group_legend)
    source_handles = [Line2D([], [], linestyle="", marker="o", color=colors[s], label=s) for s in sources]
    ax.legend(handles=source_handles, title="source", loc="upper right", fontsize=7)

    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    return fig


def render_tsne(
    points: Sequence[EmbeddingPoint],
    output: Union[str, Path],
    fmt: str = "png",
    min_marker: float = MIN_MARKER,
    max_marker: float = MAX_MARKER,
) -> Path:
    """Scatter: χρώμα = source, marker = architecture group, εμβαδόν = mAP drop."""
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    data = _write_json(output.with_suffix(".json"), [asdict(p) for p in points])
    options = {"min_marker": min_marker, "max_marker": max_marker}
    _write_spec(FigureSpec(kind="scatter", data=data, output=output, format=fmt, options=options))
    return _save(build_tsne_figure(points, min_marker, max_marker), output, fmt)


# ============================================================
# Histograms και στατιστικά
# ============================================================

def _panel_payload(panel: HistogramPanel) -> dict:
    return {
        "channel": panel.channel,
        "scope": panel.scope,
        "label": panel.label,
        "bins": [int(b) for b in panel.bins],
        "stats": asdict(panel.stats) if panel.stats is not None else None,
    }


def _panel_from_payload(payload: dict) -> HistogramPanel:
    stats = HistogramStats(**payload["stats"]) if payload["stats"] is not None else None
    return HistogramPanel(
        channel=payload["channel"],
        scope=payload["scope"],
        label=payload["label"],
        bins=np.asarray(payload["bins"], dtype=np.int64),
        stats=stats,
    )


def build_histogram_figure(panels: Sequence[HistogramPanel], space: str = "RGB") -> Figure:
    channels = list(dict.fromkeys(p.channel for p in panels))
    if len(panels) != len(channels) * len(SCOPES):
        raise InvalidArgumentError(f"expected {len(channels)}×{len(SCOPES)} panels, got {len(panels)}")

    fig, axes = plt.subplots(len(channels), len(SCOPES), figsize=(12, 3 * len(channels)), squeeze=False)
    rgb = {"R": "tab:red", "G": "tab:green", "B": "tab:blue"}
    for panel in panels:
        ax = axes[channels.index(panel.channel)][SCOPES.index(panel.scope)]
        ax.stairs(panel.bins, np.arange(len(panel.bins) + 1), fill=True, color=rgb.get(panel.channel, "tab:gray"))
        ax.set_xlim(0, 255)
        ax.set_title(f"{space} {panel.channel} - {panel.label}", fontsize=8)
        if panel.stats is not None:
            s = panel.stats
            ax.text(
                0.98, 0.95,
                f"{s.mean:.0f} ± {s.std:.0f}\nmed {s.median:.0f}\nskew {s.skewness:.2f}\nkurt {s.kurtosis:.2f}",
                transform=ax.transAxes, ha="right", va="top", fontsize=7,
            )
    fig.tight_layout()
    return fig


def render_histograms(panels: Sequence[HistogramPanel], output: Union[str, Path], space: str = "RGB", fmt: str = "png") -> Path:
    """3×3 grid: γραμμές = κανάλια, στήλες = ένα patch / ένα source / όλα."""
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    data = _write_json(output.with_suffix(".json"), {"space": space, "panels": [_panel_payload(p) for p in panels]})
    _write_spec(FigureSpec(kind="histogram_grid", data=data, output=output, format=fmt, options={"space": space}))
    return _save(build_histogram_figure(panels, space), output, fmt)


def render_stats_table(stats: Sequence[HistogramStats], output: Union[str, Path]) -> Path:
    """
    CSV με στήλες Channel, Source, Mean±Std, Median, Skewness, Kurtosis.

    Οι αριθμοί γράφονται με πλήρη ακρίβεια (repr) ώστε να διαβάζονται πίσω ακριβώς.
    """
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    rows = [
        [s.channel, s.source, f"{s.mean!r}±{s.std!r}", repr(s.median), repr(s.skewness), repr(s.kurtosis)]
        for s in stats
    ]
    pd.DataFrame(rows, columns=STATS_COLUMNS).to_csv(output, index=False)
    _write_json(output.with_suffix(".json"), [asdict(s) for s in stats])
    logger.info(f"💾 Stats table with {len(rows)} rows saved to {output}")
    return output


def read_stats_table(path: Union[str, Path]) -> List[dict]:
    """Διαβάζει το CSV πίσω σε dicts με floats (mean, std χωριστά)."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(frame.columns) != STATS_COLUMNS:
        raise InvalidArgumentError(f"{path}: unexpected columns {list(frame.columns)}")
    rows = []
    for record in frame.to_dict(orient="records"):
        mean, std = record["Mean±Std"].split("±")
        rows.append(
            {
                "channel": record["Channel"],
                "source": record["Source"],
                "mean": float(mean),
                "std": float(std),
                "median": float(record["Median"]),
                "skewness": float(record["Skewness"]),
                "kurtosis": float(record["Kurtosis"]),
            }
        )
    return rows


# ============================================================
# Replay
# ============================================================

def render_from_spec(spec: FigureSpec) -> Path:
    """Ξαναφτιάχνει ένα figure μόνο από το data sidecar του."""
    if not spec.data.exists():
        raise FileNotFoundError(f"Figure data not found: {spec.data}")
    payload = json.loads(spec.data.read_text(encoding="utf-8"))
    options = spec.options

    if spec.kind == "heatmap":
        matrix = CompatibilityMatrix(**{k: v for k, v in payload.items() if k != "labels"})
        return _save(build_heatmap_figure(matrix, options.get("title")), spec.output, spec.format)
    if spec.kind == "scatter":
        points = [EmbeddingPoint(**p) for p in payload]
        fig = build_tsne_figure(
            points,
            float(options.get("min_marker", MIN_MARKER)),
            float(options.get("max_marker", MAX_MARKER)),
        )
        return _save(fig, spec.output, spec.format)
    if spec.kind == "histogram_grid":
        panels = [_panel_from_payload(p) for p in payload["panels"]]
        return _save(build_histogram_figure(panels, payload["space"]), spec.output, spec.format)

    stats = [HistogramStats(**s) for s in payload]
    return render_stats_table(stats, spec.output)


def load_figure_spec(path: Union[str, Path]) -> FigureSpec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Figure spec not found: {path}")
    return FigureSpec.model_validate_json(path.read_text(encoding="utf-8"))
