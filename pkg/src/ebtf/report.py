"""Rendering: excess-risk charts (SVG) and a mean/se summary table from a
records CSV.

SVG output is kept byte-reproducible for identical input: fixed hash salt for
element ids, no embedded creation date, and deterministic series ordering.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .experiments import VARIANTS, read_records  # noqa: E402


class ReportError(RuntimeError):
    """Unusable records input (empty or malformed)."""


_COLORS = {
    "oracle": "#777777",
    "plugin": "#9467bd",
    "pretrained": "#ff7f0e",
    "finetuned": "#1f77b4",
    "scratch": "#2ca02c",
}

SUMMARY_HEADER = ("target,pretrain,variant,n,l2_distance,hellinger,"
                  "cells,excess_mean,excess_se,mse_mean,mse_se")


def _mean_se(values: list[float]) -> tuple[float, float]:
    k = len(values)
    mean = sum(values) / k
    if k < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (k - 1)
    return mean, math.sqrt(var / k)


def _group_cells(rows: list[dict]) -> dict:
    """(pretrain, variant, n) -> list of rows (one per seed)."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["pretrain"], row["variant"], row["n"]),
                          []).append(row)
    return groups


def infer_sweep_kind(rows: list[dict]) -> str:
    """"n" when the finetuned variant spans several sizes, else "distance"."""
    sizes = {r["n"] for r in rows if r["variant"] == "finetuned"}
    if len(sizes) > 1:
        return "n"
    return "distance"


def write_summary(path, rows: list[dict]) -> None:
    groups = _group_cells(rows)
    lines = [SUMMARY_HEADER]
    for key in sorted(groups, key=lambda k: (k[0], VARIANTS.index(k[1]), k[2])):
        cells = groups[key]
        excess_mean, excess_se = _mean_se([c["excess_risk"] for c in cells])
        mse_mean, mse_se = _mean_se([c["mse_vs_oracle"] for c in cells])
        first = cells[0]

        def fmt(x):
            return "" if x is None else f"{x:.6g}"

        lines.append(",".join([
            first["target"], key[0], key[1], str(key[2]),
            fmt(first["l2_distance"]), fmt(first["hellinger"]),
            str(len(cells)), f"{excess_mean:.6g}", f"{excess_se:.6g}",
            f"{mse_mean:.6g}", f"{mse_se:.6g}",
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _series_stats(cells_by_x: dict) -> tuple[list, list, list, list]:
    xs = sorted(cells_by_x)
    means, lo, hi = [], [], []
    for x in xs:
        vals = cells_by_x[x]
        m = sum(vals) / len(vals)
        means.append(m)
        lo.append(m - min(vals))
        hi.append(max(vals) - m)
    return xs, means, lo, hi


def _constant_band(ax, rows: list[dict], variant: str) -> None:
    vals = [r["excess_risk"] for r in rows]
    mean = sum(vals) / len(vals)
    ax.axhline(mean, color=_COLORS[variant], linestyle="--", linewidth=1.2,
               label=variant)
    if len(vals) > 1:
        ax.axhspan(min(vals), max(vals), color=_COLORS[variant], alpha=0.08)


def _plot_distance(rows: list[dict], ax) -> None:
    # x axis: component-mean distance when recorded, else Hellinger
    have_l2 = any(r["l2_distance"] is not None for r in rows
                  if r["variant"] in ("pretrained", "finetuned"))
    x_key = "l2_distance" if have_l2 else "hellinger"
    for variant in ("pretrained", "finetuned"):
        per_x: dict[float, list[float]] = {}
        for r in rows:
            if r["variant"] == variant and r[x_key] is not None:
                per_x.setdefault(r[x_key], []).append(r["excess_risk"])
        if not per_x:
            continue
        xs, means, lo, hi = _series_stats(per_x)
        ax.errorbar(xs, means, yerr=[lo, hi], marker="o", capsize=3,
                    color=_COLORS[variant], label=variant)
    for variant in ("scratch", "plugin", "oracle"):
        sub = [r for r in rows if r["variant"] == variant]
        if sub:
            _constant_band(ax, sub, variant)
    ax.set_xlabel("prior mean distance" if have_l2 else "Hellinger distance")
    ax.set_ylabel("excess risk")


def _plot_sizes(rows: list[dict], axes) -> None:
    pretrains = sorted({r["pretrain"] for r in rows if r["pretrain"]})
    for ax, pre in zip(axes, pretrains):
        mine = [r for r in rows if r["pretrain"] == pre]
        per_n: dict[int, list[float]] = {}
        for r in mine:
            if r["variant"] == "finetuned":
                per_n.setdefault(r["n"], []).append(r["excess_risk"])
        if per_n:
            xs, means, lo, hi = _series_stats(per_n)
            ax.errorbar(xs, means, yerr=[lo, hi], marker="o", capsize=3,
                        color=_COLORS["finetuned"], label="finetuned")
        pre_only = [r for r in mine if r["variant"] == "pretrained"]
        if pre_only:
            _constant_band(ax, pre_only, "pretrained")
        shared = [r for r in rows if not r["pretrain"]]
        for variant in ("scratch", "plugin", "oracle"):
            sub = [r for r in shared if r["variant"] == variant]
            if not sub:
                continue
            if variant == "scratch" and len({r["n"] for r in sub}) > 1:
                per_n = {}
                for r in sub:
                    per_n.setdefault(r["n"], []).append(r["excess_risk"])
                xs, means, lo, hi = _series_stats(per_n)
                ax.errorbar(xs, means, yerr=[lo, hi], marker="s", capsize=3,
                            color=_COLORS[variant], label=variant)
            else:
                _constant_band(ax, sub, variant)
        dist = next((r["l2_distance"] for r in mine
                     if r["l2_distance"] is not None), None)
        title = pre if dist is None else f"{pre}  (distance {dist:.2f})"
        ax.set_title(title, fontsize=9)
        ax.set_xlabel("finetuning observations")
        ax.set_ylabel("excess risk")


def render(records_path, out_dir, kind: str | None = None) -> list[Path]:
    """Chart + summary for one records CSV; returns the written paths."""
    rows = read_records(records_path)
    if not rows:
        raise ReportError(f"no data rows in {records_path}")
    if kind is None:
        kind = infer_sweep_kind(rows)
    if kind not in ("distance", "n"):
        raise ReportError(f"unknown sweep kind {kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    plt.rcParams["svg.hashsalt"] = "fixed-report-salt"
    plt.rcParams["svg.fonttype"] = "none"   # keep labels as searchable text
    if kind == "distance":
        fig, ax = plt.subplots(figsize=(7.0, 4.5))
        _plot_distance(rows, ax)
        axes = [ax]
    else:
        panels = sorted({r["pretrain"] for r in rows if r["pretrain"]}) or [""]
        ncols = min(2, len(panels))
        nrows = (len(panels) + ncols - 1) // ncols
        fig, axs = plt.subplots(nrows, ncols, squeeze=False,
                                figsize=(6.0 * ncols, 4.0 * nrows))
        axes = [a for row in axs for a in row]
        _plot_sizes(rows, axes)
        for extra in axes[len(panels):]:
            extra.set_visible(False)
    for ax in axes:
        if ax.get_visible() and ax.has_data():
            ax.legend(fontsize=8)
            ax.grid(True, alpha=0.3)
    fig.suptitle(f"excess risk vs {'prior distance' if kind == 'distance' else 'sample size'}",
                 fontsize=11)
    fig.tight_layout()
    svg_path = out_dir / f"excess_{kind}.svg"
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)

    summary_path = out_dir / "summary.csv"
    write_summary(summary_path, rows)
    return [svg_path, summary_path]
