"""CSV tables and vector charts for the evaluation commands.

CSVs are the authoritative output; every file starts with a
`# schema: <name>/<version>` line. Charts are rendered from the same frames
with plotly and exported as SVG.
"""
import logging
from pathlib import Path

import pandas as pd
import plotly.graph_objects as go

logger = logging.getLogger(__name__)

SCHEMA_PREFIX = "# schema: "


def write_csv(frame: pd.DataFrame, path, schema: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        f.write(f"{SCHEMA_PREFIX}{schema}\n")
        frame.to_csv(f, index=False, float_format="%.10g", lineterminator="\n")
    return path


def read_schema(path) -> str | None:
    with Path(path).open() as f:
        first = f.readline().rstrip("\n")
    return first[len(SCHEMA_PREFIX):] if first.startswith(SCHEMA_PREFIX) else None


def read_csv(path) -> pd.DataFrame:
    skip = 1 if read_schema(path) is not None else 0
    return pd.read_csv(path, skiprows=skip)


def _export(fig: go.Figure, path) -> Path | None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fig.write_image(str(path), format="svg")
    except Exception as e:
        logger.warning("could not render chart %s (%s); the CSV is unaffected", path, e)
        return None
    return path


def line_chart(frame: pd.DataFrame, x: str, ys: list[str], path, title: str = "", y_title: str = "") -> Path | None:
    fig = go.Figure()
    for y in ys:
        fig.add_trace(go.Scatter(
            x=frame[x],
            y=frame[y],
            name=y,
            mode="lines+markers",
        ))
    fig.update_layout(title=title, xaxis_title=x, yaxis_title=y_title or ", ".join(ys), template="plotly_white")
    return _export(fig, path)


def bar_chart(frame: pd.DataFrame, x: str, ys: list[str], path, title: str = "", errors: dict | None = None) -> Path | None:
    """Grouped bars, one group per row of `frame`; `errors` maps a y column to
    the column holding its error bar."""
    errors = errors or {}
    fig = go.Figure()
    for y in ys:
        error_y = dict(type="data", array=frame[errors[y]]) if y in errors else None
        fig.add_trace(go.Bar(x=frame[x], y=frame[y], name=y, error_y=error_y))
    fig.update_layout(title=title, barmode="group", template="plotly_white")
    return _export(fig, path)


def comparison_table(results: pd.DataFrame, metrics=("FED", "FED_acc")) -> pd.DataFrame:
    """Mean and std per model over seeds, rows in first-appearance order.

    Failed cells carry NaN metrics and show up as gaps.
    """
    rows = []
    for model, group in results.groupby("model", sort=False):
        row = {"model": model}
        for metric in metrics:
            values = group[metric].dropna()
            row[f"{metric}_mean"] = values.mean() if len(values) else float("nan")
            row[f"{metric}_std"] = values.std(ddof=0) if len(values) else float("nan")
        row["seeds"] = " ".join(str(s) for s in group["seed"].tolist())
        if "num_steps" in group:
            # denoising steps picked per seed; empty for mixture heads
            row["num_steps"] = " ".join(str(int(s)) for s in group["num_steps"].dropna())
        row["failed"] = int(group[list(metrics)].isna().any(axis=1).sum())
        rows.append(row)
    return pd.DataFrame(rows)


def format_comparison(table: pd.DataFrame, metrics=("FED", "FED_acc")) -> pd.DataFrame:
    shown = pd.DataFrame({"model": table["model"]})
    for metric in metrics:
        shown[metric] = [
            "n/a" if pd.isna(m) else f"{m:.4f} ± {s:.4f}"
            for m, s in zip(table[f"{metric}_mean"], table[f"{metric}_std"])
        ]
    shown["seeds"] = table["seeds"]
    if "num_steps" in table:
        shown["num_steps"] = table["num_steps"].fillna("")
    return shown
