"""Merge per-trial result CSVs into a mean ± std table per strategy."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def _strategy_of(run_dir: Path) -> str:
    cfg = run_dir / "config.json"
    if cfg.exists():
        data = json.loads(cfg.read_text(encoding="utf-8"))
        label = data.get("strategy", run_dir.name)
        if data.get("with_aux") is False and label == "lplgrad":
            label += " (w/o aux)"
        return label
    return run_dir.name


def collect(results_dir) -> dict[str, dict[int, list[tuple[int, float]]]]:
    """strategy -> round -> [(labeled_count, accuracy) per trial]."""
    root = Path(results_dir)
    runs = sorted({p.parent for p in root.rglob("results_trial*.csv")})
    if not runs:
        raise FileNotFoundError(f"no results_trial*.csv under {root}")
    table: dict[str, dict[int, list[tuple[int, float]]]] = {}
    for run in runs:
        strategy = _strategy_of(run)
        if strategy in table:
            strategy = f"{strategy} [{run.relative_to(root)}]"
        rounds = table.setdefault(strategy, {})
        for path in sorted(run.glob("results_trial*.csv")):
            with open(path, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    rounds.setdefault(int(row["round"]), []).append(
                        (int(row["labeled_count"]), float(row["test_accuracy"])))
    return table


def summarize(results_dir) -> list[dict]:
    rows = []
    for strategy, rounds in collect(results_dir).items():
        for rnd in sorted(rounds):
            acc = np.array([a for _, a in rounds[rnd]])
            std = float(np.std(acc, ddof=1)) if len(acc) > 1 else float("nan")
            rows.append({"strategy": strategy, "round": rnd, "labeled_count": rounds[rnd][0][0],
                         "mean_accuracy": float(acc.mean()), "std_accuracy": std,
                         "trials": len(acc)})
    return rows


def cell(mean: float, std: float) -> str:
    if np.isnan(std):
        return f"{100 * mean:.1f}"
    return f"{100 * mean:.1f}±{100 * std:.1f}"


def write_report(results_dir, out_path=None) -> tuple[Path, str]:
    """Write report.csv and return it with a text table (strategies x labeled counts)."""
    rows = summarize(results_dir)
    out_path = Path(out_path) if out_path else Path(results_dir) / "report.csv"
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["strategy", "round", "labeled_count", "mean_accuracy", "std_accuracy",
                         "trials", "cell"])
        for r in rows:
            writer.writerow([r["strategy"], r["round"], r["labeled_count"], repr(r["mean_accuracy"]),
                             repr(r["std_accuracy"]), r["trials"], cell(r["mean_accuracy"], r["std_accuracy"])])
    counts = sorted({r["labeled_count"] for r in rows})
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    width = max(len(s) for s in strategies) + 2
    lines = ["Method".ljust(width) + "".join(f"{c:>12}" for c in counts)]
    for s in strategies:
        by_count = {r["labeled_count"]: cell(r["mean_accuracy"], r["std_accuracy"])
                    for r in rows if r["strategy"] == s}
        lines.append(s.ljust(width) + "".join(f"{by_count.get(c, '-'):>12}" for c in counts))
    return out_path, "\n".join(lines)
