"""Summaries of a finished run: per-epoch loss table and accuracy figure."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("loss_d", "loss_g_adv", "loss_id", "loss_eq", "loss_cycle")


def epoch_means(metrics_csv: str | Path) -> list[dict]:
    """Mean of every loss column per epoch."""
    sums: dict[int, dict[str, float]] = defaultdict(lambda: defaultdict(float))
    counts: dict[int, int] = defaultdict(int)
    with open(metrics_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        keys = [k for k in LOSS_KEYS if k in (reader.fieldnames or [])]
        for row in reader:
            e = int(row["epoch"])
            counts[e] += 1
            for k in keys:
                sums[e][k] += float(row[k])
    return [{"epoch": e, "steps": counts[e], **{k: v / counts[e] for k, v in sums[e].items()}}
            for e in sorted(counts)]


def markdown_table(rows: list[dict]) -> str:
    if not rows:
        return "(no rows)\n"
    cols = list(rows[0])
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join("---" for _ in cols) + "|"]
    for r in rows:
        lines.append("| " + " | ".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def accuracy_figure(results: dict, path: str | Path) -> Path:
    names = ["source only", "translated target set", "target oracle"]
    vals = [100 * results["source_only_acc"], 100 * results["trigan_acc"], 100 * results["oracle_acc"]]
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    bars = ax.bar(names, vals, color=["#999999", "#3a7bd5", "#2e8b57"])
    for b, v in zip(bars, vals):
        ax.text(b.get_x() + b.get_width() / 2, v + 1, f"{v:.1f}", ha="center", fontsize=9)
    ax.set_ylabel("target test accuracy (%)")
    ax.set_ylim(0, 105)
    ax.set_title(f"uplift over source only: {results['uplift_pp']:+.1f} pp", fontsize=10)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def render_report(run_dir: str | Path) -> str:
    """Write ``report.md`` (and ``uplift.png`` when results exist) into ``run_dir``."""
    run_dir = Path(run_dir)
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        metrics = run_dir / "gan" / "metrics.csv"
    if not metrics.exists():
        raise FileNotFoundError(f"no metrics.csv under {run_dir}")
    text = "## Adversarial training, per-epoch means\n\n" + markdown_table(epoch_means(metrics))
    res_path = run_dir / "results.json"
    if res_path.exists():
        res = json.loads(res_path.read_text())
        rows = [{"classifier": k, "target_acc": res[f"{k}_acc"]} for k in ("source_only", "trigan", "oracle")]
        text += "\n## Target test accuracy\n\n" + markdown_table(rows)
        text += f"\nuplift over source only: {res['uplift_pp']:+.2f} pp\n"
        accuracy_figure(res, run_dir / "uplift.png")
        text += "\n![accuracy](uplift.png)\n"
    (run_dir / "report.md").write_text(text)
    return text
