"""Figure-ready CSVs from per-seed run metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mprlab.errors import ConfigError

AGGREGATE_FIELDS = ["provider", "episode", "median_success", "std_success",
                    "best_so_far", "base_success"]
CURVE_FIELDS = ["provider", "tau_bin", "tau_center", "mean_reward", "std_reward", "n"]


@dataclass
class ExperimentReport:
    provider: str
    base_success: float
    metrics_paths: list[str] = field(default_factory=list)
    median_final: float = 0.0
    std_final: float = 0.0
    median_best: float = 0.0

    def to_dict(self) -> dict:
        return dict(vars(self))


def read_eval_curve(path) -> tuple[np.ndarray, np.ndarray]:
    """(episodes, success) for the rows that carry an evaluation."""
    eps, rates = [], []
    with Path(path).open(encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["eval_success_rate"] != "":
                eps.append(int(row["episode"]))
                rates.append(float(row["eval_success_rate"]))
    return np.array(eps, dtype=int), np.array(rates)


def seed_curves(paths: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-seed curves; every seed must share one evaluation grid."""
    if not paths:
        raise ConfigError("aggregation needs at least one seed")
    grid, rows = None, []
    for p in paths:
        eps, rates = read_eval_curve(p)
        if grid is None:
            grid = eps
        elif not np.array_equal(grid, eps):
            raise ConfigError(f"inconsistent evaluation grid in {p}")
        rows.append(rates)
    return grid, np.vstack(rows)


def summarize(report: ExperimentReport) -> ExperimentReport:
    _, curves = seed_curves(report.metrics_paths)
    report.median_final = float(np.median(curves[:, -1]))
    report.std_final = float(curves[:, -1].std())
    report.median_best = float(np.median(curves.max(axis=1)))
    return report


def aggregate(reports: Sequence[ExperimentReport], path) -> Path:
    """One row per (provider, evaluation episode); std is across seeds."""
    rows, grid0 = [], None
    for rep in reports:
        grid, curves = seed_curves(rep.metrics_paths)
        if grid0 is None:
            grid0 = grid
        elif not np.array_equal(grid0, grid):
            raise ConfigError(f"provider {rep.provider} uses a different evaluation grid")
        best = np.median(np.maximum.accumulate(curves, axis=1), axis=0)
        for j, ep in enumerate(grid):
            rows.append({"provider": rep.provider, "episode": int(ep),
                         "median_success": _f(np.median(curves[:, j])),
                         "std_success": _f(curves[:, j].std()),
                         "best_so_far": _f(best[j]), "base_success": _f(rep.base_success)})
    return _write(path, AGGREGATE_FIELDS, rows)


def reward_curve_rows(provider: str, reward_lists: Sequence[np.ndarray], n_bins: int = 20) -> list[dict]:
    """Mean per-step reward against normalized time t / T, pooled over episodes."""
    bins = [[] for _ in range(n_bins)]
    for r in reward_lists:
        T = len(r)
        for t, v in enumerate(r):
            bins[min(int(n_bins * t / T), n_bins - 1)].append(v)
    out = []
    for b, vals in enumerate(bins):
        vals = np.array(vals)
        out.append({"provider": provider, "tau_bin": b, "tau_center": _f((b + 0.5) / n_bins),
                    "mean_reward": _f(vals.mean()) if len(vals) else "",
                    "std_reward": _f(vals.std()) if len(vals) else "", "n": len(vals)})
    return out


def write_reward_curves(path, rows: Sequence[dict]) -> Path:
    return _write(path, CURVE_FIELDS, rows)


def _f(v: float) -> str:
    return f"{float(v):.9g}"


def _write(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        w.writerows(rows)
    return path
