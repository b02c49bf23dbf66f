"""
Report Emission

Writes results.csv, summary.md (mean ± std over seeds per method at one
checkpoint step) and one SVG line chart per metric and evaluation set
showing the seed-averaged metric against the training step.

Output bytes depend only on the rows: no timestamps, fixed float formats,
canonical row order.
"""

import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from laplace_lora.core.errors import BadConfig
from laplace_lora.orchestrator import RESULT_COLUMNS, RunResult, canonical

logger = logging.getLogger("laplace-lora.report")

METRICS = ("acc", "ece", "nll")
SUMMARY_DECIMALS = 12
CSV_FLOAT_FORMAT = "%.17g"

SVG_WIDTH = 640
SVG_HEIGHT = 400
MARGIN = 60
LEGEND_WIDTH = 150
PALETTE = (
    "#1f77b4",
    "#ff7f0e",
    "#2ca02c",
    "#d62728",
    "#9467bd",
    "#8c564b",
    "#e377c2",
    "#7f7f7f",
    "#bcbd22",
    "#17becf",
)


def write_results_csv(result: RunResult, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    canonical(result.rows).to_csv(
        target, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n"
    )
    return target


def summarize(result: RunResult, step: Optional[int] = None) -> Tuple[pd.DataFrame, int]:
    """
    Mean and std over seeds per (dataset, shift, method) at one step

    Args:
        step: Checkpoint step; None picks the largest step present

    Returns:
        (frame with <metric>_mean, <metric>_std and n_seeds columns, step used)
    """
    rows = result.rows
    chosen = int(rows["step"].max()) if step is None else int(step)
    at_step = rows[rows["step"] == chosen]
    if at_step.empty:
        raise BadConfig(f"No results at step {chosen}; available: {result.steps}")
    grouped = at_step.groupby(["dataset", "shift", "method"], sort=True)
    summary = grouped[list(METRICS)].mean().add_suffix("_mean")
    # std over seeds with ddof=1; a single seed reports 0
    spread = grouped[list(METRICS)].std(ddof=1).fillna(0.0).add_suffix("_std")
    counts = grouped["seed"].nunique().rename("n_seeds")
    return summary.join(spread).join(counts).reset_index(), chosen


def _cell(mean: float, std: float) -> str:
    return f"{mean:.{SUMMARY_DECIMALS}f} ± {std:.{SUMMARY_DECIMALS}f}"


def render_summary(result: RunResult, step: Optional[int] = None) -> str:
    """Markdown tables, one per (dataset, shift), methods as rows"""
    if result.empty:
        return "# Laplace-LoRA results\n\nNo result rows.\n"
    summary, chosen = summarize(result, step)
    lines = [
        "# Laplace-LoRA results",
        "",
        f"Step {chosen}; mean ± std over seeds.",
        "",
    ]
    for (dataset, shift), table in summary.groupby(["dataset", "shift"], sort=True):
        lines.append(f"## {dataset} / {shift}")
        lines.append("")
        lines.append("| method | seeds | acc | ece | nll |")
        lines.append("|---|---|---|---|---|")
        for _, row in table.iterrows():
            cells = [_cell(row[f"{m}_mean"], row[f"{m}_std"]) for m in METRICS]
            lead = f"| {row['method']} | {int(row['n_seeds'])} | "
            lines.append(lead + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def parse_summary(text: str) -> Dict[Tuple[str, str, str], Dict[str, float]]:
    """Means back out of render_summary output, keyed by (dataset, shift, method)"""
    out: Dict[Tuple[str, str, str], Dict[str, float]] = {}
    section: Optional[Tuple[str, str]] = None
    for line in text.splitlines():
        if line.startswith("## "):
            dataset, shift = line[3:].split(" / ", 1)
            section = (dataset, shift)
        elif section and line.startswith("| ") and not line.startswith("| method"):
            cells = [c.strip() for c in line.strip("|").split("|")]
            means = [float(c.split("±")[0]) for c in cells[2:]]
            out[(section[0], section[1], cells[0])] = dict(zip(METRICS, means))
    return out


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.-]+", "_", text).strip("_") or "none"


def _ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    if hi <= lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def render_curve_svg(curves: Dict[str, pd.Series], title: str, metric: str) -> str:
    """
    Line chart of seed-mean metric against step, one polyline per method

    Args:
        curves: method -> Series indexed by step
    """
    steps = sorted({int(s) for series in curves.values() for s in series.index})
    values = np.concatenate([series.to_numpy(dtype=np.float64) for series in curves.values()])
    finite = values[np.isfinite(values)]
    y_lo, y_hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if y_hi - y_lo < 1e-12:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    x_lo, x_hi = float(steps[0]), float(steps[-1])

    plot_w = SVG_WIDTH - 2 * MARGIN - LEGEND_WIDTH
    plot_h = SVG_HEIGHT - 2 * MARGIN

    def sx(step: float) -> float:
        if x_hi == x_lo:
            return MARGIN + plot_w / 2.0
        return MARGIN + (step - x_lo) / (x_hi - x_lo) * plot_w

    def sy(v: float) -> float:
        return MARGIN + plot_h - (v - y_lo) / (y_hi - y_lo) * plot_h

    bottom = MARGIN + plot_h
    right = MARGIN + plot_w
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" '
        f'viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>',
        f'<text x="{SVG_WIDTH / 2:.2f}" y="24" text-anchor="middle" font-size="14">'
        f"{_escape(title)}</text>",
        f'<line x1="{MARGIN}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{bottom}" stroke="black"/>',
        f'<text x="{(MARGIN + right) / 2:.2f}" y="{SVG_HEIGHT - 16}" '
        f'text-anchor="middle">step</text>',
        f'<text x="16" y="{(MARGIN + bottom) / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(MARGIN + bottom) / 2:.2f})">{metric}</text>',
    ]
    for t in _ticks(x_lo, x_hi, min(len(steps), 5)):
        x = sx(t)
        parts.append(
            f'<line x1="{x:.2f}" y1="{bottom}" x2="{x:.2f}" y2="{bottom + 5}" stroke="black"/>'
        )
        parts.append(f'<text x="{x:.2f}" y="{bottom + 18}" text-anchor="middle">{t:.0f}</text>')
    for t in _ticks(y_lo, y_hi):
        y = sy(t)
        parts.append(
            f'<line x1="{MARGIN - 5}" y1="{y:.2f}" x2="{MARGIN}" y2="{y:.2f}" stroke="black"/>'
        )
        parts.append(f'<text x="{MARGIN - 8}" y="{y + 4:.2f}" text-anchor="end">{t:.3g}</text>')

    for i, (method, series) in enumerate(sorted(curves.items())):
        color = PALETTE[i % len(PALETTE)]
        points = [
            f"{sx(float(s)):.2f},{sy(float(v)):.2f}"
            for s, v in series.sort_index().items()
            if np.isfinite(v)
        ]
        if len(points) > 1:
            parts.append(
                f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                f'points="{" ".join(points)}"/>'
            )
        for point in points:
            cx, cy = point.split(",")
            parts.append(f'<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>')
        ly = MARGIN + 16 * i
        parts.append(
            f'<line x1="{right + 16}" y1="{ly}" x2="{right + 36}" y2="{ly}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(f'<text x="{right + 42}" y="{ly + 4}">{_escape(method)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def step_curves(
    result: RunResult, metrics: Sequence[str] = METRICS
) -> Dict[str, str]:
    """File name -> SVG text for every (metric, dataset, shift)"""
    rows = result.rows
    means = rows.groupby(["dataset", "shift", "method", "step"], sort=True)[list(metrics)].mean()
    charts: Dict[str, str] = {}
    for (dataset, shift), block in means.groupby(level=["dataset", "shift"], sort=True):
        for metric in metrics:
            curves = {
                method: series.droplevel(["dataset", "shift", "method"])
                for method, series in block[metric].groupby(level="method", sort=True)
            }
            name = f"curve_{metric}_{_slug(dataset)}_{_slug(shift)}.svg"
            charts[name] = render_curve_svg(curves, f"{dataset} / {shift}: {metric}", metric)
    return charts


def emit_report(
    result: RunResult, out_dir: Union[str, Path], step: Optional[int] = None
) -> List[Path]:
    """
    Write results.csv, summary.md and the step-curve SVGs

    An empty result still writes a header-only results.csv.

    Returns:
        Paths written, in a fixed order
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [write_results_csv(result, out / "results.csv")]

    summary_path = out / "summary.md"
    summary_path.write_text(render_summary(result, step), encoding="utf-8")
    written.append(summary_path)

    if not result.empty:
        for name, svg in sorted(step_curves(result).items()):
            path = out / name
            path.write_text(svg, encoding="utf-8")
            written.append(path)

    logger.info(f"✅ Report written to {out} ({len(written)} files)")
    return written


__all__ = [
    "RESULT_COLUMNS",
    "emit_report",
    "parse_summary",
    "render_summary",
    "step_curves",
    "summarize",
    "write_results_csv",
]
