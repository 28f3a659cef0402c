"""Report writers: CMC CSV files, JSON summary and a dependency-free SVG plot."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .evaluation import EvalReport

SUMMARY_RANKS = (1, 5, 10, 20, 30)


def write_cmc_csv(path, cmc) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "accuracy"])
        for k, acc in enumerate(cmc, 1):
            w.writerow([k, repr(float(acc))])


def read_cmc_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["accuracy"]) for r in rows])


def summary_dict(report: EvalReport, config_hash: str | None = None) -> dict:
    out = {"mean": report.summary(SUMMARY_RANKS),
           "per_trial": [t.summary(SUMMARY_RANKS) for t in report.per_trial],
           "metadata": report.metadata}
    if config_hash is not None:
        out["config_hash"] = config_hash
    return out


def write_report(report: EvalReport, out_dir, config_hash: str | None = None,
                 label: str = "proposed") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_cmc_csv(out / "cmc_mean.csv", report.cmc)
    for t, trial in enumerate(report.per_trial):
        write_cmc_csv(out / f"cmc_trial_{t:02d}.csv", trial.cmc)
    (out / "summary.json").write_text(json.dumps(summary_dict(report, config_hash), indent=2,
                                                 sort_keys=True) + "\n", encoding="utf-8")
    (out / "cmc.svg").write_text(cmc_svg({label: report.cmc}), encoding="utf-8")
    return out


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def cmc_svg(curves: dict, width: int = 480, height: int = 360, max_rank: int | None = None) -> str:
    """CMC curves as an SVG document: axes, ticks and one polyline per curve."""
    left, right, top, bottom = 50, 20, 20, 40
    pw, ph = width - left - right, height - top - bottom
    n = max_rank or max(len(c) for c in curves.values())

    def xy(k, acc):
        x = left + (k - 1) / max(n - 1, 1) * pw
        y = top + (1.0 - acc) * ph
        return f"{x:.2f},{y:.2f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for v in np.linspace(0, 1, 6):
        y = top + (1 - v) * ph
        parts.append(f'<text x="{left - 6}" y="{y + 4:.2f}" font-size="10" text-anchor="end">{v:.1f}</text>')
    for k in sorted({1, *range(5, n + 1, 5)} & set(range(1, n + 1))):
        x = left + (k - 1) / max(n - 1, 1) * pw
        parts.append(f'<text x="{x:.2f}" y="{top + ph + 14}" font-size="10" text-anchor="middle">{k}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 6}" font-size="11" text-anchor="middle">rank</text>')
    for i, (name, c) in enumerate(curves.items()):
        col = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(xy(k, a) for k, a in enumerate(np.asarray(c)[:n], 1))
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{left + pw - 4}" y="{top + ph - 10 - 14 * i}" font-size="11" '
                     f'text-anchor="end" fill="{col}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
