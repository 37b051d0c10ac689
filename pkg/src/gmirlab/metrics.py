"""Per-domain evaluation, transfer metrics and report rendering."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .net import ModelConfig, forward


def evaluate(config: ModelConfig, params: np.ndarray, test: Dataset) -> float:
    """Classification accuracy in percent."""
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = np.argmax(forward(config, params, test.features), axis=1)
    return 100.0 * float(np.count_nonzero(pred == test.labels)) / len(test)


@dataclass(frozen=True)
class DomainResult:
    run_label: str
    old_metric: float
    new_metric: float

    def __post_init__(self):
        for v in (self.old_metric, self.new_metric):
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"metric {v} outside [0, 100]")

    @property
    def mean_metric(self) -> float:
        return (self.old_metric + self.new_metric) / 2


@dataclass(frozen=True)
class TransferResult:
    backward_transfer: float
    forward_transfer: float
    mean_metric: float


def transfer_metrics(run: DomainResult, lb_old: float, lb_new: float) -> TransferResult:
    """Transfer relative to the single-domain scratch lower bounds."""
    return TransferResult(run.old_metric - lb_old, run.new_metric - lb_new, run.mean_metric)


def time_reduction(baseline_hours: float, method_hours: float) -> float:
    """Percent of baseline time saved; negative when the method is slower."""
    if baseline_hours <= 0:
        raise ValueError("baseline time must be positive")
    return 100.0 * (baseline_hours - method_hours) / baseline_hours


def mean_and_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def standard_error(values: Sequence[float]) -> float:
    n = len(values)
    return mean_and_std(values)[1] / math.sqrt(n) if n > 1 else 0.0


@dataclass
class RunRow:
    """One run under one seed."""

    label: str
    kind: str  # "scratch" or "finetune"
    seed: int
    result: DomainResult
    transfer: Optional[TransferResult] = None
    work: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def record(self) -> dict:
        rec = {"run": self.label, "kind": self.kind, "seed": self.seed,
               "old": self.result.old_metric, "new": self.result.new_metric,
               "mean": self.result.mean_metric}
        if self.transfer is not None:
            rec["bwt"] = self.transfer.backward_transfer
            rec["fwt"] = self.transfer.forward_transfer
        rec.update({f"param_{k}": v for k, v in self.params.items()})
        rec.update({f"work_{k}": v for k, v in sorted(self.work.items())})
        return rec


SCRATCH_OLD = "scratch-clear"
SCRATCH_NEW = "scratch-adverse"
SCRATCH_ALL = "scratch-all"


def attach_transfer(rows: list[RunRow]) -> None:
    """Fill BWT/FWT on finetune rows using the same seed's scratch rows."""
    bounds: dict[int, dict[str, DomainResult]] = {}
    for r in rows:
        if r.kind == "scratch":
            bounds.setdefault(r.seed, {})[r.label] = r.result
    for r in rows:
        b = bounds.get(r.seed, {})
        if r.kind == "finetune" and SCRATCH_OLD in b and SCRATCH_NEW in b:
            r.transfer = transfer_metrics(r.result, b[SCRATCH_OLD].old_metric,
                                          b[SCRATCH_NEW].new_metric)


@dataclass
class ExperimentReport:
    rows: list[RunRow]
    config: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)

    def labels(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.label not in seen:
                seen.append(r.label)
        return seen

    def rows_for(self, label: str) -> list[RunRow]:
        return [r for r in self.rows if r.label == label]

    def values(self, label: str, metric: str) -> list[float]:
        out = []
        for r in self.rows_for(label):
            rec = r.record()
            if metric in rec:
                out.append(rec[metric])
        return out

    def summary(self) -> list[dict]:
        """One aggregated record per run label (mean and sample std over seeds)."""
        out = []
        for label in self.labels():
            rows = self.rows_for(label)
            rec: dict = {"run": label, "kind": rows[0].kind, "n_seeds": len(rows)}
            rec.update({f"param_{k}": v for k, v in rows[0].params.items()})
            for metric in ("old", "new", "mean", "bwt", "fwt"):
                vals = self.values(label, metric)
                if vals:
                    m, s = mean_and_std(vals)
                    rec[metric] = m
                    rec[f"{metric}_std"] = s
            work_keys = sorted({k for r in rows for k in r.work})
            for k in work_keys:
                rec[f"work_{k}"] = float(np.mean([r.work.get(k, 0) for r in rows]))
            out.append(rec)
        return out

    def to_json(self) -> str:
        doc = {"format": "gmirlab-report/1", "config": self.config, "seeds": list(self.seeds),
               "rows": [r.record() for r in self.rows], "summary": self.summary()}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        summary = self.summary()
        keys: list[str] = []
        for rec in summary:
            for k in rec:
                if k not in keys:
                    keys.append(k)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        for rec in summary:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})
        return buf.getvalue()

    def to_table(self) -> str:
        return format_table(self.summary())


def _fmt(value: Optional[float], std: Optional[float], transfer: Optional[float]) -> str:
    if value is None:
        return "-"
    s = f"{value:6.2f}"
    if std:
        s += f" ±{std:4.2f}"
    if transfer is not None:
        s += f" ({transfer:+.2f})"
    return s


def format_table(summary: Sequence[dict]) -> str:
    """Aligned text table: method | old | new | mean, transfer in parentheses."""
    header = ("method", "old (BWT)", "new (FWT)", "mean")
    lines = [header]
    for rec in summary:
        lines.append((
            rec["run"],
            _fmt(rec.get("old"), rec.get("old_std"), rec.get("bwt")),
            _fmt(rec.get("new"), rec.get("new_std"), rec.get("fwt")),
            _fmt(rec.get("mean"), rec.get("mean_std"), None),
        ))
    widths = [max(len(row[i]) for row in lines) for i in range(4)]
    out = []
    for n, row in enumerate(lines):
        out.append(" | ".join(cell.ljust(w) if i == 0 else cell.rjust(w)
                              for i, (cell, w) in enumerate(zip(row, widths))))
        if n == 0:
            out.append("-+-".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def report_from_json(text: str) -> ExperimentReport:
    doc = json.loads(text)
    rows = []
    for rec in doc["rows"]:
        transfer = None
        if "bwt" in rec:
            transfer = TransferResult(rec["bwt"], rec["fwt"], rec["mean"])
        rows.append(RunRow(
            rec["run"], rec["kind"], rec["seed"], DomainResult(rec["run"], rec["old"], rec["new"]),
            transfer,
            work={k[5:]: v for k, v in rec.items() if k.startswith("work_")},
            params={k[6:]: v for k, v in rec.items() if k.startswith("param_")},
        ))
    return ExperimentReport(rows, doc.get("config", {}), doc.get("seeds", []))
