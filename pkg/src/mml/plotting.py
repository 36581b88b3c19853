"""Loss / accuracy curves from metric logs, written as CSV plus an SVG figure."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CURVE_KEYS = ("loss", "task", "kl", "distill", "top1", "top5", "mAP")


def read_metric_logs(paths) -> list[dict]:
    rows = []
    for path in paths:
        path = Path(path)
        with path.open() as fh:
            for n, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{n}: not a JSON object ({exc.msg})") from None
                rec.setdefault("source", path.parent.name or path.stem)
                rows.append(rec)
    if not rows:
        raise ValueError("metric logs contain no records")
    return rows


def curve_table(rows: list[dict]) -> list[dict]:
    """Long format: one row per (source, model, split, epoch, metric)."""
    out = []
    for r in rows:
        for key in CURVE_KEYS:
            if key in r:
                out.append({"source": r["source"], "model": r.get("model", ""), "split": r["split"],
                            "epoch": r["epoch"], "metric": key, "value": r[key]})
    return out


def write_curves(rows: list[dict], out_dir, stem: str = "curves") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = curve_table(rows)
    csv_path = out_dir / f"{stem}.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["source", "model", "split", "epoch", "metric", "value"])
        w.writeheader()
        w.writerows(table)

    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    series: dict[tuple, list] = {}
    for t in table:
        series.setdefault((t["source"], t["model"], t["split"], t["metric"]), []).append((t["epoch"], t["value"]))
    for (source, model, split, metric), pts in sorted(series.items()):
        pts.sort()
        xs, ys = zip(*pts)
        label = f"{source}/{model} {metric}" if model else f"{source} {metric}"
        if split == "train" and metric == "loss":
            ax_loss.plot(xs, ys, marker=".", label=label)
        elif split == "val" and metric in ("top1", "mAP"):
            ax_acc.plot(xs, ys, marker=".", label=label)
    ax_loss.set(xlabel="epoch", ylabel="train loss", title="training loss")
    ax_acc.set(xlabel="epoch", ylabel="val top-1 / mAP", title="validation", ylim=(0, 1.02))
    for ax in (ax_loss, ax_acc):
        if ax.lines:
            ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    svg_path = out_dir / f"{stem}.svg"
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
    return csv_path, svg_path
