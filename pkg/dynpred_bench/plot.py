"""SVG figures of cross-validated metrics."""

import io

from pathlib import Path
from typing import Dict, Union

import matplotlib
import numpy as np
import pandas as pd

from matplotlib.figure import Figure

from dynpred.format import format_float
from dynpred.metrics import BRIER, CINDEX, TDAUC

from .const import CINDEX_TABLE_FILENAME
from .harness import RESULT_COLUMNS

METRIC_LABELS = {BRIER: "Brier score", TDAUC: "Time-dependent AUC", CINDEX: "C index"}
SVG_SALT = "dynpred"


def load_results(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"method": str, "metric": str})
    missing = [col for col in RESULT_COLUMNS if col not in frame.columns]
    if missing:
        raise ValueError(f"Malformed results table: missing columns {missing}")
    return frame


def _svg(fig: Figure) -> str:
    buf = io.BytesIO()
    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "path"}):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue().decode("utf-8")


def metric_figure(frame: pd.DataFrame, metric: str, landmark: float) -> str:
    rows = frame[(frame["metric"] == metric) & (frame["landmark"] == landmark)]
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    for method in pd.unique(rows["method"]):
        series = rows[rows["method"] == method].sort_values("horizon")
        # undefined cells stay NaN and break the line
        ax.plot(series["horizon"], series["mean"], marker="o", label=method)
    ax.set_xlabel("Horizon")
    ax.set_ylabel(METRIC_LABELS[metric])
    ax.set_title(f"{METRIC_LABELS[metric]}, landmark {format_float(landmark)}")
    ax.legend(loc="best")
    fig.tight_layout()
    return _svg(fig)


def cindex_table(frame: pd.DataFrame) -> str:
    rows = frame[frame["metric"] == CINDEX]
    methods = list(pd.unique(rows["method"]))
    landmarks = sorted(pd.unique(rows["landmark"]))
    cells = []
    for method in methods:
        line = []
        for lm in landmarks:
            hit = rows[(rows["method"] == method) & (rows["landmark"] == lm)]
            mean = hit["mean"].iloc[0] if len(hit) else np.nan
            sd = hit["sd"].iloc[0] if len(hit) else np.nan
            if np.isnan(mean):
                line.append("-")
            elif np.isnan(sd):
                line.append(f"{mean:.3f}")
            else:
                line.append(f"{mean:.3f} ({sd:.3f})")
        cells.append(line)
    fig = Figure(figsize=(1.6 + 1.4 * len(landmarks), 0.6 + 0.35 * len(methods)))
    ax = fig.subplots()
    ax.axis("off")
    table = ax.table(
        cellText=cells,
        rowLabels=methods,
        colLabels=[f"landmark {format_float(lm)}" for lm in landmarks],
        loc="center",
    )
    table.auto_set_font_size(False)
    table.set_fontsize(9)
    return _svg(fig)


def render_plots(frame: pd.DataFrame) -> Dict[str, str]:
    """One SVG per metric and landmark, plus the C index table."""
    if frame.empty:
        raise ValueError("No results to plot")
    files = {}
    for metric in (TDAUC, BRIER):
        for lm in sorted(pd.unique(frame.loc[frame["metric"] == metric, "landmark"])):
            files[f"{metric}_landmark_{format_float(lm)}.svg"] = metric_figure(frame, metric, lm)
    if (frame["metric"] == CINDEX).any():
        files[CINDEX_TABLE_FILENAME] = cindex_table(frame)
    return files
