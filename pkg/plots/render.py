#!/usr/bin/env python3
"""Figure-reproduction scripts for multi-model assimilation results.

Reads the CLI's CSV outputs (documented schema) and renders the study's
standard figures. Line-style conventions match the originals: truth
dotted, per-model forecasts dash-dot/dashed, analyzed state solid,
observations as circles.

Usage:
    python plots/render.py --figure ID --in RESULT_DIR --out FILE.png
    python plots/render.py --list
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

MODEL_STYLES = ["-.", "--", (0, (3, 1, 1, 1, 1, 1))]
TRUTH_STYLE = dict(linestyle=":", color="tab:red", label="truth")
ANALYZED_STYLE = dict(linestyle="-", color="black", label="analyzed")
OBS_STYLE = dict(marker="o", linestyle="none", markersize=4,
                 markerfacecolor="none", color="tab:gray", label="data")


class RenderError(RuntimeError):
    """Missing inputs or columns; the message names what is absent."""


@dataclass
class Table:
    """One parsed CSV: header order plus float columns (blank -> NaN)."""

    path: Path
    columns: dict

    def col(self, name: str):
        if name not in self.columns:
            raise RenderError(
                f"{self.path}: missing required column {name!r} "
                f"(have: {', '.join(self.columns)})")
        return self.columns[name]

    def model_ids(self) -> list:
        ids = []
        for name in self.columns:
            if name.startswith("model_") and name.endswith("_mean_0"):
                ids.append(name[len("model_"):-len("_mean_0")])
        return ids


def read_table(path: Path) -> Table:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = list(reader)
    columns = {}
    for j, name in enumerate(header):
        vals = []
        for r in rows:
            cell = r[j].strip() if j < len(r) else ""
            try:
                vals.append(float(cell) if cell else math.nan)
            except ValueError:  # non-numeric column (e.g. pdf "source" labels)
                vals.append(math.nan)
        columns[name] = vals
    return Table(path=path, columns=columns)


def resolve_input(result_dir: Path, name: str) -> Path:
    """``<name>.csv`` directly in the directory, or ``<name>/results.csv``."""
    flat = result_dir / f"{name}.csv"
    if flat.is_file():
        return flat
    nested = result_dir / name / "results.csv"
    if nested.is_file():
        return nested
    raise FileNotFoundError(name)


@dataclass(frozen=True)
class FigureSpec:
    """A renderable figure: required inputs and the routine that draws them."""

    figure_id: str
    inputs: tuple
    description: str
    draw: "callable" = field(compare=False)


def load_inputs(spec: FigureSpec, result_dir: Path) -> dict:
    if not result_dir.is_dir():
        raise RenderError(f"result directory not found: {result_dir}")
    tables, missing = {}, []
    for name in spec.inputs:
        try:
            tables[name] = read_table(resolve_input(result_dir, name))
        except FileNotFoundError:
            missing.append(f"{name}.csv (or {name}/results.csv)")
    if missing:
        raise RenderError(
            f"{result_dir}: missing input file(s) for figure "
            f"{spec.figure_id!r}: {', '.join(missing)}")
    return tables


def finite(xs, ys):
    pairs = [(x, y) for x, y in zip(xs, ys) if not (math.isnan(x) or math.isnan(y))]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _plot_state_panel(ax, table: Table, component: int, show_analyzed=True,
                      show_models=True):
    t = table.col("t")
    if show_models:
        for style, mid in zip(MODEL_STYLES, table.model_ids()):
            ax.plot(*finite(t, table.col(f"model_{mid}_mean_{component}")),
                    linestyle=style, label=mid)
    ax.plot(*finite(t, table.col(f"truth_{component}")), **TRUTH_STYLE)
    if show_analyzed:
        ax.plot(*finite(t, table.col(f"analyzed_mean_{component}")), **ANALYZED_STYLE)
    ax.plot(*finite(t, table.col(f"obs_{component}")), **OBS_STYLE)
    ax.grid(alpha=0.3)


def draw_pf_ode(tables: dict):
    rows = ["oscillator_noda", "oscillator_pf_cn_ref", "oscillator_pf_rk4_ref"]
    titles = ["no assimilation", "reference: cn", "reference: rk4"]
    fig, axes = plt.subplots(3, 2, figsize=(10, 10), sharex=True)
    for r, (name, title) in enumerate(zip(rows, titles)):
        for c, comp_label in enumerate(("y", "y'")):
            ax = axes[r][c]
            _plot_state_panel(ax, tables[name], c,
                              show_analyzed=(name != "oscillator_noda"))
            ax.set_title(f"{title}: {comp_label}")
    axes[0][0].legend(loc="upper right", fontsize=8)
    for ax in axes[-1]:
        ax.set_xlabel("t")
    return fig


def draw_three_models(tables: dict):
    table = tables["infil_ekf"]
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    windows = [(None, None), (0.0, 6.0), (40.0, 62.0)]
    titles = ["full horizon", "early time", "late time"]
    for ax, (lo, hi), title in zip(axes, windows, titles):
        _plot_state_panel(ax, table, 0, show_analyzed=False)
        if lo is not None:
            ax.set_xlim(lo, hi)
            t = table.col("t")
            vals = [v for tk, v in zip(t, table.col("truth_0")) if lo <= tk <= hi]
            if vals:
                pad = 0.25 * (max(vals) - min(vals) + 1e-9)
                ax.set_ylim(min(vals) - pad, max(vals) + pad)
        ax.set_title(title)
        ax.set_xlabel("t (min)")
    axes[0].set_ylabel("infiltration rate (cm/min)")
    axes[0].legend(fontsize=8)
    return fig


def draw_three_scheme(tables: dict):
    names = ["infil_ekf", "infil_enkf", "infil_pf_ga_ref", "infil_pf_parlange_ref"]
    titles = ["extended Kalman filter", "ensemble Kalman filter (1000)",
              "particle filter (ref: green_ampt)", "particle filter (ref: parlange)"]
    fig, axes = plt.subplots(2, 2, figsize=(11, 8), sharex=True, sharey=True)
    for ax, name, title in zip(axes.flat, names, titles):
        _plot_state_panel(ax, tables[name], 0)
        ax.set_title(title)
    axes[0][0].legend(fontsize=8)
    for ax in axes[-1]:
        ax.set_xlabel("t (min)")
    for ax in axes[:, 0]:
        ax.set_ylabel("infiltration rate (cm/min)")
    return fig


def draw_model_error(tables: dict):
    names = ["infil_ekf", "infil_ekf_timedep"]
    titles = ["white model errors", "time-dependent model errors"]
    fig, axes = plt.subplots(3, 2, figsize=(11, 11), sharex=True)
    for c, (name, title) in enumerate(zip(names, titles)):
        table = tables[name]
        t = table.col("t")
        ax = axes[0][c]
        _plot_state_panel(ax, table, 0)
        ax.set_title(title)

        ax = axes[1][c]
        for style, mid in zip(MODEL_STYLES, table.model_ids()):
            ax.semilogy(*finite(t, table.col(f"model_{mid}_var_0")),
                        linestyle=style, label=mid)
        ax.semilogy(*finite(t, table.col("analyzed_var_0")), **ANALYZED_STYLE)
        ax.set_ylabel("predictive variance")
        ax.grid(alpha=0.3)

        ax = axes[2][c]
        for style, mid in zip(MODEL_STYLES, table.model_ids()):
            ax.plot(*finite(t, table.col(f"weight_{mid}")), linestyle=style, label=mid)
        ax.plot(*finite(t, table.col("weight_data")), linestyle="-",
                color="black", label="data")
        ax.set_ylabel("weight")
        ax.set_xlabel("t (min)")
        ax.grid(alpha=0.3)
    axes[0][0].legend(fontsize=8)
    axes[2][0].legend(fontsize=8)
    return fig


def draw_bma_da(tables: dict):
    table = tables["compare_bma"]
    ekf_cols = [c for c in table.columns if c.startswith("ekf@")]
    if not ekf_cols:
        raise RenderError(f"{table.path}: missing required column 'ekf@<sd>'")
    t = table.col("t")
    fig, axes = plt.subplots(1, len(ekf_cols), figsize=(6 * len(ekf_cols), 4.5),
                             sharey=True)
    axes = [axes] if len(ekf_cols) == 1 else list(axes)
    for ax, col in zip(axes, ekf_cols):
        ax.plot(*finite(t, table.col("truth_0")), **TRUTH_STYLE)
        ax.plot(*finite(t, table.col(col)), linestyle="--", label=col)
        ax.plot(*finite(t, table.col("bma")), linestyle="-", color="black", label="bma")
        ax.set_title(f"data noise sd {col.split('@')[1]}")
        ax.set_xlabel("t (min)")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    axes[0].set_ylabel("infiltration rate (cm/min)")
    return fig


def draw_bma_data_short(tables: dict):
    table = tables["compare_bma"]
    t = table.col("t")
    ekf_cols = [c for c in table.columns if c.startswith("ekf@")]
    if not ekf_cols:
        raise RenderError(f"{table.path}: missing required column 'ekf@<sd>'")
    lo = t[len(t) // 3]
    hi = t[min(len(t) - 1, len(t) // 3 + 11)]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(*finite(t, table.col("truth_0")), **TRUTH_STYLE)
    ax.plot(*finite(t, table.col(ekf_cols[0])), linestyle="--",
            label=f"assimilated ({ekf_cols[0]})")
    ax.plot(*finite(t, table.col("bma")), linestyle="-", color="black", label="bma")
    ax.set_xlim(lo, hi)
    vals = [v for tk, v in zip(t, table.col("truth_0")) if lo <= tk <= hi]
    pad = 0.3 * (max(vals) - min(vals) + 1e-9)
    ax.set_ylim(min(vals) - pad, max(vals) + pad)
    ax.set_xlabel("t (min)")
    ax.set_ylabel("infiltration rate (cm/min)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return fig


def draw_pf_mcs(tables: dict):
    table = tables["pdf"]
    source = table.col("source")
    # source column holds strings; re-read raw
    with open(table.path, newline="") as f:
        rows = list(csv.DictReader(f))
    series = {}
    for r in rows:
        series.setdefault(r["source"], []).append(
            (0.5 * (float(r["bin_left"]) + float(r["bin_right"])), float(r["height"])))
    styles = {"green_ampt": "-.", "parlange": "--", "assimilated": "-", "truth": ":"}
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for name, pts in series.items():
        xs, ys = zip(*pts)
        ax.plot(xs, ys, linestyle=styles.get(name, "-"), label=name)
    # observation rendered as a column of circles
    obs = _observation_from_sidecar(table.path)
    if obs is not None:
        top = max(h for pts in series.values() for _, h in pts)
        ax.plot([obs] * 12, [top * (j + 1) / 12.0 for j in range(12)], **OBS_STYLE)
    ax.set_xlabel("infiltration rate (cm/min)")
    ax.set_ylabel("pdf")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return fig


def _observation_from_sidecar(pdf_path: Path):
    import json

    sidecar = pdf_path.with_name("pdf_metrics.json")
    if not sidecar.is_file():
        return None
    with open(sidecar) as f:
        return json.load(f).get("observation")


FIGURES = {
    spec.figure_id: spec
    for spec in (
        FigureSpec("pf-ODE",
                   ("oscillator_noda", "oscillator_pf_cn_ref", "oscillator_pf_rk4_ref"),
                   "oscillator trajectories: no assimilation vs both reference choices",
                   draw_pf_ode),
        FigureSpec("three-models", ("infil_ekf",),
                   "competing infiltration model forecasts vs truth, with zooms",
                   draw_three_models),
        FigureSpec("three-scheme",
                   ("infil_ekf", "infil_enkf", "infil_pf_ga_ref", "infil_pf_parlange_ref"),
                   "2x2 panel of filter schemes on the infiltration scenario",
                   draw_three_scheme),
        FigureSpec("model-error", ("infil_ekf", "infil_ekf_timedep"),
                   "white vs time-dependent model errors: states, variances, weights",
                   draw_model_error),
        FigureSpec("BMA-DA", ("compare_bma",),
                   "EKF at two data-noise levels vs data-independent BMA",
                   draw_bma_da),
        FigureSpec("bma-data-short", ("compare_bma",),
                   "zoom between observations: assimilated models vs BMA",
                   draw_bma_data_short),
        FigureSpec("pf-MCS", ("pdf",),
                   "heterogeneous-soil rate PDFs with the observation column",
                   draw_pf_mcs),
    )
}


def render(figure_id: str, result_dir, out_file) -> Path:
    """Render one figure id from a directory of result CSVs."""
    if figure_id not in FIGURES:
        raise RenderError(
            f"unknown figure id {figure_id!r} (known: {', '.join(sorted(FIGURES))})")
    spec = FIGURES[figure_id]
    tables = load_inputs(spec, Path(result_dir))
    fig = spec.draw(tables)
    out = Path(out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--figure", help="figure id to render")
    parser.add_argument("--in", dest="result_dir", help="directory of result CSVs")
    parser.add_argument("--out", help="output image path")
    parser.add_argument("--list", action="store_true", help="list figure ids")
    args = parser.parse_args(argv)
    if args.list:
        for fid, spec in sorted(FIGURES.items()):
            print(f"{fid}: {spec.description} (inputs: {', '.join(spec.inputs)})")
        return 0
    if not (args.figure and args.result_dir and args.out):
        parser.error("--figure, --in and --out are required (or use --list)")
    try:
        out = render(args.figure, args.result_dir, args.out)
    except RenderError as exc:
        print(f"render: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
