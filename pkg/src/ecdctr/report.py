"""Result tables and figures.

Rows are one (arm, seed) result each. The markdown table mirrors the
usual variant / GAUC / improvement layout; the CSV carries per-seed
rows. Figures are rendered to PNG next to the delimited output.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CSV_COLUMNS = ("variant", "seed", "gauc", "auc", "improvement_vs_target_only")


@dataclass
class ResultRow:
    variant: str  # arm name
    seed: int
    gauc: float
    auc: float
    failed: bool = False


def _baseline_by_seed(rows: list[ResultRow]) -> dict[int, float]:
    return {r.seed: r.gauc for r in rows
            if r.variant == "target_only" and not r.failed}


def _improvement(row: ResultRow, baseline: dict[int, float]) -> float | None:
    if row.failed or not baseline:
        return None
    base = baseline.get(row.seed)
    if base is None:
        base = float(np.mean(list(baseline.values())))
    return row.gauc - base


def emit_report(rows: list[ResultRow], path, format: str = "csv") -> Path:
    """Write the result table; csv is per-seed, markdown is per-variant."""
    path = Path(path)
    if format == "csv":
        _emit_csv(rows, path)
    elif format == "markdown":
        _emit_markdown(rows, path)
    else:
        raise ValueError(f"unknown report format {format!r}")
    return path


def _fmt(x: float | None, signed: bool = False) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return f"{x:+.4f}" if signed else f"{x:.4f}"


def _emit_csv(rows: list[ResultRow], path: Path) -> None:
    baseline = _baseline_by_seed(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in sorted(rows, key=lambda r: (r.variant, r.seed)):
            if r.failed:
                w.writerow([r.variant, r.seed, "failed", "failed", ""])
                continue
            w.writerow([r.variant, r.seed, f"{r.gauc:.6f}", f"{r.auc:.6f}",
                        _fmt(_improvement(r, baseline), signed=True)])


def variant_means(rows: list[ResultRow]) -> dict[str, tuple[float, float, int]]:
    """variant -> (mean gauc, std gauc, n seeds) over non-failed rows."""
    out = {}
    for v in sorted({r.variant for r in rows}):
        g = [r.gauc for r in rows if r.variant == v and not r.failed]
        if g:
            out[v] = (float(np.mean(g)), float(np.std(g)), len(g))
    return out


def _emit_markdown(rows: list[ResultRow], path: Path) -> None:
    means = variant_means(rows)
    base = means.get("target_only", (None,))[0]
    lines = ["| Variant | GAUC | Improv. |", "|---|---|---|"]
    for v, (g, s, n) in means.items():
        improv = _fmt(g - base, signed=True) if base is not None else ""
        lines.append(f"| {v} | {g:.4f} ± {s:.4f} ({n} seeds) | {improv} |")
    for r in rows:
        if r.failed:
            lines.append(f"| {r.variant} (seed {r.seed}) | failed | |")
    path.write_text("\n".join(lines) + "\n")


def read_csv(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            failed = rec["gauc"] == "failed"
            rows.append(ResultRow(
                variant=rec["variant"], seed=int(rec["seed"]),
                gauc=float("nan") if failed else float(rec["gauc"]),
                auc=float("nan") if failed else float(rec["auc"]),
                failed=failed))
    return rows


# ---------------------------------------------------------------------------
# figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_figures(rows: list[ResultRow], out_dir) -> list[Path]:
    """GAUC-by-variant bars; a dimension-sweep line when dim_* arms exist."""
    out_dir = Path(out_dir)
    plt = _pyplot()
    written = []

    means = variant_means(rows)
    if means:
        fig, ax = plt.subplots(figsize=(7, 4))
        names = list(means)
        g = [means[v][0] for v in names]
        err = [means[v][1] for v in names]
        ax.bar(names, g, yerr=err, capsize=3, color="#4878b0")
        ax.set_ylabel("GAUC (final-month mean)")
        lo = min(g) - 0.02
        ax.set_ylim(max(0.0, lo), max(g) + 0.02)
        ax.tick_params(axis="x", rotation=30)
        fig.tight_layout()
        p = out_dir / "gauc_by_variant.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)

    dims = {v: int(v.split("_", 1)[1]) for v in means
            if v.startswith("dim_") and v.split("_", 1)[1].isdigit()}
    if len(dims) >= 2:
        fig, ax = plt.subplots(figsize=(6, 4))
        order = sorted(dims, key=dims.get)
        ax.plot([dims[v] for v in order], [means[v][0] for v in order],
                marker="o")
        ax.set_xlabel("history embedding dimension")
        ax.set_ylabel("GAUC")
        ax.set_xscale("log", base=2)
        fig.tight_layout()
        p = out_dir / "dim_sweep.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)
    return written


def render_daily_series(days: list[dict], path) -> Path | None:
    """Daily GAUC/AUC trace for a single run (from report.json days)."""
    pts = [(d["day"], d["gauc"], d["auc"]) for d in days if d["gauc"] is not None]
    if not pts:
        return None
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    x, g, a = zip(*pts)
    ax.plot(x, g, label="GAUC", lw=1.2)
    ax.plot(x, a, label="AUC", lw=1.2, alpha=0.7)
    ax.set_xlabel("simulated day")
    ax.set_ylabel("metric")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
