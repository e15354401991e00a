"""Derived metrics over run telemetry and externally supplied accuracy tables.

All functions are pure; re-running them on stored telemetry is idempotent.
Accuracy tables declare their scale (percent or fraction); series metrics
are computed in the declared scale, so sensitivities over percent tables
come out in percent points per unit noise ratio.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import LayoutMismatchError, ParseError
from .federation import RoundRecord
from .models import ModelParams
from .noise import NoiseReport

SCALE_PERCENT = "percent"
SCALE_FRACTION = "fraction"


def last_k_average(records: list[RoundRecord], k: int) -> float:
    """Mean test accuracy over the final k evaluated rounds."""
    evaluated = [r.test_accuracy for r in records if r.test_accuracy is not None]
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(evaluated) < k:
        raise ValueError(f"need {k} evaluated rounds, have {len(evaluated)}")
    return float(np.mean(evaluated[-k:]))


def accuracy_drop_ratio(acc_iid: float, acc_noniid: float) -> float:
    """(acc_iid - acc_noniid) / acc_iid; negative when non-IID wins."""
    if acc_iid == 0:
        raise ZeroDivisionError("acc_iid must be nonzero")
    return (acc_iid - acc_noniid) / acc_iid


def sensitivity(acc_at_eps: float, acc_at_eps_plus_delta: float, delta: float) -> float:
    """(acc(eps) - acc(eps+delta)) / delta; sign is not clamped."""
    if not delta > 0:
        raise ValueError("delta must be > 0")
    return (acc_at_eps - acc_at_eps_plus_delta) / delta


def overall_noise_ratio(report: NoiseReport, sizes) -> float:
    """Size-weighted mean of per-client flip ratios."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if len(sizes) != len(report.per_client_ratio):
        raise ValueError("sizes length must match per-client ratios")
    return float((report.per_client_ratio * sizes).sum() / sizes.sum())


def grad_norm_series(checkpoints: list[ModelParams]) -> list[float]:
    """Euclidean norms of consecutive parameter differences."""
    if len(checkpoints) < 2:
        raise ValueError("need at least 2 checkpoints")
    layout = checkpoints[0].layout
    for cp in checkpoints[1:]:
        if cp.layout != layout:
            raise LayoutMismatchError("checkpoints must share a layout")
    return [
        float(np.linalg.norm(b.values - a.values))
        for a, b in zip(checkpoints[:-1], checkpoints[1:])
    ]


@dataclass(frozen=True)
class AccuracyTable:
    """(partition, mode, eps) -> accuracy, with a declared value scale."""

    entries: dict = field(default_factory=dict)
    scale: str = SCALE_PERCENT

    def __post_init__(self):
        if self.scale not in (SCALE_PERCENT, SCALE_FRACTION):
            raise ValueError(f"unknown accuracy scale {self.scale!r}")
        bound = 100.0 if self.scale == SCALE_PERCENT else 1.0
        for key, value in self.entries.items():
            if not 0.0 <= value <= bound:
                raise ValueError(f"accuracy {value} for {key} outside declared {self.scale} bounds")

    def as_fraction(self, key) -> float:
        value = self.entries[key]
        return value / 100.0 if self.scale == SCALE_PERCENT else value

    def eps_grid(self, partition: str, mode: str) -> list[float]:
        return sorted(e for (p, m, e) in self.entries if p == partition and m == mode)


def read_accuracy_table(path: str, scale: str = SCALE_PERCENT) -> AccuracyTable:
    """Load a ``partition,mode,eps,accuracy`` CSV into an AccuracyTable."""
    entries = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"partition", "mode", "eps", "accuracy"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ParseError(f"accuracy table needs columns {sorted(required)}", row=1)
        for row_no, row in enumerate(reader, start=2):
            try:
                key = (row["partition"], row["mode"], float(row["eps"]))
                entries[key] = float(row["accuracy"])
            except (TypeError, ValueError):
                raise ParseError("malformed accuracy row", row=row_no) from None
    return AccuracyTable(entries=entries, scale=scale)


def sensitivity_series(table: AccuracyTable, partition: str, mode: str) -> list[tuple[float, float]]:
    """s(eps) over adjacent grid points present in the table; gaps are skipped."""
    grid = table.eps_grid(partition, mode)
    series = []
    for eps, nxt in zip(grid[:-1], grid[1:]):
        delta = nxt - eps
        acc_now = table.entries[(partition, mode, eps)]
        acc_next = table.entries[(partition, mode, nxt)]
        series.append((eps, sensitivity(acc_now, acc_next, delta)))
    return series


def drop_ratio_series(
    table: AccuracyTable, mode: str, noniid_partition: str, iid_partition: str = "iid"
) -> list[tuple[float, float]]:
    """Drop ratio at every eps where both the IID and non-IID entries exist."""
    series = []
    for eps in table.eps_grid(iid_partition, mode):
        key_noniid = (noniid_partition, mode, eps)
        if key_noniid in table.entries:
            series.append(
                (
                    eps,
                    accuracy_drop_ratio(
                        table.entries[(iid_partition, mode, eps)], table.entries[key_noniid]
                    ),
                )
            )
    return series
