"""Figures written next to the report files."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import SCRATCH_ALL, SCRATCH_NEW, SCRATCH_OLD, ExperimentReport  # noqa: E402

BWT_COLOR = "tab:blue"
FWT_COLOR = "tab:pink"


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata so reruns produce the same bytes
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def _finetune_summary(report: ExperimentReport) -> list[dict]:
    return [r for r in report.summary() if r["kind"] == "finetune" and "bwt" in r]


def _all_reference(report: ExperimentReport) -> Optional[tuple[float, float]]:
    """Scratch-on-all relative to the single-domain lower bounds."""
    summ = {r["run"]: r for r in report.summary()}
    if not {SCRATCH_ALL, SCRATCH_OLD, SCRATCH_NEW} <= set(summ):
        return None
    return (summ[SCRATCH_ALL]["old"] - summ[SCRATCH_OLD]["old"],
            summ[SCRATCH_ALL]["new"] - summ[SCRATCH_NEW]["new"])


def plot_transfer(report: ExperimentReport, path: Path) -> Optional[Path]:
    """Grouped bars of backward/forward transfer per finetuning method."""
    rows = _finetune_summary(report)
    if not rows:
        return None
    x = np.arange(len(rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(6, 0.7 * len(rows) + 2), 4))
    ax.bar(x - width / 2, [r["bwt"] for r in rows], width, yerr=[r.get("bwt_std", 0) for r in rows],
           color=BWT_COLOR, label="backward transfer", capsize=2)
    ax.bar(x + width / 2, [r["fwt"] for r in rows], width, yerr=[r.get("fwt_std", 0) for r in rows],
           color=FWT_COLOR, label="forward transfer", capsize=2)
    ax.axhline(0.0, color="red", lw=1)
    ax.set_xticks(x)
    ax.set_xticklabels([r["run"] for r in rows], rotation=35, ha="right")
    ax.set_ylabel("accuracy change vs. scratch lower bound (points)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_work(report: ExperimentReport, path: Path) -> Optional[Path]:
    """Total gradient-evaluation work per run, scratch-on-all as the yardstick."""
    rows = [r for r in report.summary() if "work_total_work" in r and r["run"] != SCRATCH_OLD
            and r["run"] != SCRATCH_NEW]
    if not rows:
        return None
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(rows) + 2), 4))
    names = [r["run"] for r in rows]
    train = np.array([r.get("work_train_sample_grads", 0.0) for r in rows])
    total = np.array([r["work_total_work"] for r in rows])
    ax.bar(names, train, color="0.6", label="training")
    ax.bar(names, total - train, bottom=train, color="tab:orange", label="selection / overhead")
    ref = next((r["work_total_work"] for r in rows if r["run"] == SCRATCH_ALL), None)
    if ref is not None:
        ax.axhline(ref, color="k", ls="--", lw=1, label=SCRATCH_ALL)
    ax.set_ylabel("per-sample gradient evaluations")
    ax.tick_params(axis="x", rotation=35)
    for lbl in ax.get_xticklabels():
        lbl.set_ha("right")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_sweep(report: ExperimentReport, param: str, path: Path) -> Optional[Path]:
    """Transfer against one swept hyperparameter."""
    key = f"param_{param}"
    rows = [r for r in _finetune_summary(report) if key in r]
    if not rows:
        return None
    rows.sort(key=lambda r: r[key])
    xs = [r[key] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(xs, [r["bwt"] for r in rows], yerr=[r.get("bwt_std", 0) for r in rows],
                color=BWT_COLOR, marker="o", label="backward transfer")
    ax.errorbar(xs, [r["fwt"] for r in rows], yerr=[r.get("fwt_std", 0) for r in rows],
                color=FWT_COLOR, marker="o", label="forward transfer")
    ax.axhline(0.0, color="red", lw=1)
    ref = _all_reference(report)
    if ref is not None:
        ax.axhline(ref[0], color=BWT_COLOR, ls="--", lw=1)
        ax.axhline(ref[1], color=FWT_COLOR, ls="--", lw=1)
    ax.set_xlabel(param)
    ax.set_ylabel("points vs. scratch lower bound")
    if param == "n_resample":
        ax.set_xscale("log")
        ax.set_xticks(xs)
        ax.set_xticklabels([str(v) for v in xs])
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def render_report_figures(report: ExperimentReport, fig_dir: Path,
                          sweep_param: Optional[str] = None) -> list[Path]:
    made = [plot_transfer(report, fig_dir / "transfer.png"), plot_work(report, fig_dir / "work.png")]
    if sweep_param is not None:
        made.append(plot_sweep(report, sweep_param, fig_dir / f"sweep_{sweep_param}.png"))
    return [p for p in made if p is not None]
