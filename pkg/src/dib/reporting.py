"""Metric computation and result persistence: mean final error, conditional
entropy segregated by activated module, and tabular output as CSV plus a
mirroring JSON form."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import DibModel
from .training import ErrorMatrix

RESULT_FIELDS = ["condition", "dataset", "lambda", "trial",
                 "mean_final_error", "wall_seconds"]
# wall_seconds is inherently run-dependent, so the deterministic results
# table drops it; timings live in the run manifests instead
DETERMINISTIC_FIELDS = RESULT_FIELDS[:-1]

SUMMARY_FIELDS = ["condition", "dataset", "best_lambda", "mean_error",
                  "std_error", "trials"]


def mean_final_error(matrix: ErrorMatrix) -> float:
    """Mean test error across all tasks after training on the last one."""
    return float(np.mean(matrix.final_row()))


@dataclass
class PathEntropyReport:
    """Per cell: module index -> (mean predictive entropy, sample count)."""
    per_cell: list[dict[int, tuple[float, int]]]
    total_samples: int

    def cell_mean(self, cell: int) -> float:
        stats = self.per_cell[cell]
        if not stats:
            return 0.0
        return float(np.mean([h for h, _ in stats.values()]))

    def overall_mean(self) -> float:
        return float(np.mean([self.cell_mean(c) for c in range(len(self.per_cell))]))


def _predictive_entropy(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    p = np.exp(log_p)
    # p * log p -> 0 as p -> 0; mask keeps the 0 * -inf corner quiet
    terms = np.where(p > 0.0, p * log_p, 0.0)
    return -terms.sum(axis=1)


def cond_entropy_per_path(model: DibModel, tasks) -> PathEntropyReport:
    """Predictive-distribution entropy (natural log) of every evaluation
    sample, attributed to the module that sample activated, per cell.

    Routing follows each task's memory nets, the same path inference uses.
    Modules that never fire for a cell are simply absent from that cell's
    table.
    """
    sums: list[dict[int, float]] = [dict() for _ in model.cells]
    counts: list[dict[int, int]] = [dict() for _ in model.cells]
    total = 0
    for task_id, task in enumerate(tasks):
        data = task.test
        for start in range(0, len(data), 1024):
            x = data.inputs[start:start + 1024]
            trace = model.forward_infer(x, task_id, want_trace=True)
            h = _predictive_entropy(trace.class_logits)
            total += len(h)
            for ci, cell_trace in enumerate(trace.cells):
                for mi in np.unique(cell_trace.actions):
                    rows = cell_trace.actions == mi
                    sums[ci][int(mi)] = sums[ci].get(int(mi), 0.0) + float(h[rows].sum())
                    counts[ci][int(mi)] = counts[ci].get(int(mi), 0) + int(rows.sum())
    per_cell = []
    for ci in range(len(model.cells)):
        per_cell.append({mi: (sums[ci][mi] / counts[ci][mi], counts[ci][mi])
                         for mi in sorted(counts[ci])})
    return PathEntropyReport(per_cell, total)


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def write_results(table: list[dict], path, fmt: str = "csv",
                  fields: list[str] | None = None) -> Path:
    """Write rows as delimited text or a mirroring structured form.

    Field order is fixed; floats keep 12 significant digits so a read-back
    reproduces the table."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    fields = fields or RESULT_FIELDS
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(fields)
            for row in table:
                writer.writerow([_format_value(row.get(k)) for k in fields])
    else:
        payload = [{k: row.get(k) for k in fields} for row in table]
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=False)
            f.write("\n")
    return path


def read_results(path) -> list[dict]:
    """Read back a table written by write_results (either format)."""
    path = Path(path)
    if path.suffix == ".json":
        with open(path) as f:
            return json.load(f)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = []
        for raw in reader:
            row = {}
            for k, v in raw.items():
                if v == "":
                    row[k] = None
                else:
                    try:
                        row[k] = int(v) if v.lstrip("-").isdigit() else float(v)
                    except ValueError:
                        row[k] = v
            rows.append(row)
        return rows


def entropy_report_payload(report: PathEntropyReport) -> dict:
    return {
        "total_samples": report.total_samples,
        "overall_mean": report.overall_mean(),
        "cells": [
            {
                "cell": ci,
                "mean": report.cell_mean(ci),
                "modules": [
                    {"module": mi, "mean_cond_entropy": h, "sample_count": n}
                    for mi, (h, n) in stats.items()
                ],
            }
            for ci, stats in enumerate(report.per_cell)
        ],
    }


def write_entropy_report(report: PathEntropyReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(entropy_report_payload(report), f, indent=2)
        f.write("\n")
    return path
