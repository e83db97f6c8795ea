"""Figures for run reports: grouped bars per method and model, curves for sweeps.

Everything renders with the non-interactive Agg backend straight to PNG files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LABELS = {"asr": "ASR", "amc_pct": "AMC (%)", "auc_backdoored": "AUC (backdoored)", "auc_clean": "AUC (clean)"}
METHOD_ORDER = ("rb", "gb", "dyn-one", "dyn-backdoor")


def _num(x) -> float:
    try:
        return float(x)
    except (TypeError, ValueError):
        return float("nan")


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def grouped_bars(rows: Sequence[Mapping], metric: str, out_dir: str | Path) -> list[Path]:
    """One figure per (dataset, scenario): model families on the x axis, one bar per method."""
    out_dir = Path(out_dir)
    groups: dict[tuple[str, str], list[Mapping]] = {}
    for r in rows:
        if r.get("family") and r.get("method"):
            groups.setdefault((str(r.get("dataset") or "data"), str(r.get("scenario"))), []).append(r)
    paths = []
    for (dataset, scen), grp in sorted(groups.items()):
        families = sorted({r["family"] for r in grp})
        methods = sorted({r["method"] for r in grp},
                         key=lambda m: (METHOD_ORDER.index(m) if m in METHOD_ORDER else len(METHOD_ORDER), m))
        width = 0.8 / len(methods)
        x = np.arange(len(families))
        fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(families), 3.2))
        for i, m in enumerate(methods):
            vals = []
            for f in families:
                hit = [_num(r.get(metric)) for r in grp if r["family"] == f and r["method"] == m]
                vals.append(np.nanmean(hit) if hit and not all(np.isnan(hit)) else np.nan)
            ax.bar(x + (i - (len(methods) - 1) / 2) * width, vals, width, label=m)
        ax.set_xticks(x, families)
        ax.set_ylabel(LABELS.get(metric, metric))
        ax.set_title(f"{dataset}, scenario {scen}")
        if metric in ("asr", "auc_backdoored"):
            ax.set_ylim(0, 1.05)
        ax.legend(fontsize=8, loc="upper left", bbox_to_anchor=(1.01, 1.0), frameon=False)
        ax.grid(axis="y", alpha=0.3)
        paths.append(_save(fig, out_dir / f"{metric}-{dataset}-{scen}.png"))
    return paths


def sweep_plot(curve: Sequence[Mapping], path: str | Path) -> Path:
    """ASR, AMC and backdoored AUC against the swept ratio; one line per source run."""
    runs: dict[str, list[Mapping]] = {}
    for c in curve:
        runs.setdefault(str(c.get("run", "")), []).append(c)
    param = str(curve[0]["param"]) if curve else "value"
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for name, rows in sorted(runs.items()):
        rows = sorted(rows, key=lambda r: _num(r["value"]))
        xs = [_num(r["value"]) for r in rows]
        for ax, key in zip(axes, ("asr", "amc_pct", "auc_backdoored")):
            ax.plot(xs, [_num(r.get(key)) for r in rows], marker="o", label=name or None)
    for ax, key in zip(axes, ("asr", "amc_pct", "auc_backdoored")):
        ax.set_xlabel(param)
        ax.set_ylabel(LABELS[key])
        ax.grid(alpha=0.3)
    if len(runs) > 1:
        axes[0].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, Path(path))


def transfer_bars(cells: Sequence, out_dir: str | Path) -> list[Path]:
    """ASR per target family for both scenarios, reference cell hatched."""
    out_dir = Path(out_dir)
    if not cells:
        return []
    fams = [c.target_family for c in cells]
    x = np.arange(len(fams))
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(fams), 3.2))
    for i, (key, label) in enumerate((("asr_I", "scenario I"), ("asr_II", "scenario II"))):
        vals = [np.nan if getattr(c, key) is None else getattr(c, key) for c in cells]
        bars = ax.bar(x + (i - 0.5) * 0.38, vals, 0.38, label=label)
        for b, c in zip(bars, cells):
            if c.diagonal:
                b.set_hatch("//")
    ax.set_xticks(x, fams)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("ASR")
    ax.set_title(f"triggers from {cells[0].disc_family}")
    ax.legend(fontsize=8, loc="upper left", bbox_to_anchor=(1.01, 1.0), frameon=False)
    ax.grid(axis="y", alpha=0.3)
    return [_save(fig, out_dir / "transfer.png")]
