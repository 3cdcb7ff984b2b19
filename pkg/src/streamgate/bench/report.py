"""Summary tables and figures from benchmark CSVs."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import PHASES, TimingRecord, read_records, summarize  # noqa: E402

STATS = ("n", "mean", "stddev", "min", "p50", "p90", "p99", "max")
MS = 1e3


def summary_rows(runs: dict[str, list[TimingRecord]]) -> list[dict]:
    """One row per (run, metric); times in milliseconds."""
    rows = []
    for name, records in runs.items():
        summary = summarize(records)
        for metric in (*PHASES, "decision+graph", "hit_total", "miss_total"):
            stats = summary.get(metric)
            if not stats or not stats.get("n"):
                continue
            row = {"run": name, "metric": metric}
            for s in STATS:
                row[s] = stats[s] if s == "n" else round(stats[s] * MS, 6)
            rows.append(row)
        if "hit_rate" in summary:
            rows.append({"run": name, "metric": "hit_rate", "n": len(records),
                         "mean": round(summary["hit_rate"], 6)})
    return rows


def format_table(rows: list[dict]) -> str:
    header = ["run", "metric", *STATS]
    cells = [header] + [[_cell(r.get(h)) for h in header] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _ms(values):
    return [v * MS for v in values if not math.isnan(v)]


def plot_latency(runs: dict, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, records in runs.items():
        ax.plot([r.index for r in records], [r.total * MS for r in records],
                ".", markersize=2, label=name)
    ax.set_xlabel("request")
    ax.set_ylabel("latency (ms)")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_phases(runs: dict, path: Path) -> None:
    names = list(runs)
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / len(PHASES[:-1])
    for k, phase in enumerate(PHASES[:-1]):
        means = []
        for name in names:
            vals = _ms(getattr(r, phase) for r in runs[name])
            means.append(sum(vals) / len(vals) if vals else 0.0)
        ax.bar([i + k * width for i in range(len(names))], means, width, label=phase)
    ax.set_xticks([i + width for i in range(len(names))], names)
    ax.set_ylabel("mean time (ms)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_cache(records: list[TimingRecord], path: Path) -> None:
    hits = _ms(r.total for r in records if r.cache_hit)
    misses = _ms(r.total for r in records if r.cache_hit is False)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.boxplot([misses, hits], showfliers=False)
    ax.set_xticks([1, 2], [f"miss (n={len(misses)})", f"hit (n={len(hits)})"])
    ax.set_ylabel("latency (ms)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def build_report(csv_paths, out_dir: str | Path) -> dict:
    """Write summary.csv, summary.txt and PNG figures; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = {}
    for p in csv_paths:
        records = read_records(p)
        name = records[0].mode if records else Path(p).stem
        if name in runs:
            name = Path(p).stem
        runs[name] = records
    rows = summary_rows(runs)

    written = {"summary_csv": out / "summary.csv", "summary_txt": out / "summary.txt",
               "latency": out / "latency.png", "phases": out / "phases.png"}
    with open(written["summary_csv"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["run", "metric", *STATS])
        writer.writeheader()
        writer.writerows(rows)
    written["summary_txt"].write_text(format_table(rows))
    plot_latency(runs, written["latency"])
    plot_phases(runs, written["phases"])
    for name, records in runs.items():
        if any(r.cache_hit for r in records):
            written["cache"] = out / "cache.png"
            plot_cache(records, written["cache"])
            break
    return written
