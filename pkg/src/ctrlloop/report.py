"""Cross-run reporting: a combined markdown table plus metric-vs-round plots.

A "run directory" is any directory containing ``*_report.json`` aggregates
written by the eval command. Labels of the form warmstart/roundNNN are
interpreted as round indices 0/NNN for the line plots.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def _load_reports(run_dir: Path) -> list[tuple[str, dict]]:
    reports = []
    for path in sorted(run_dir.glob("*_report.json")):
        label = path.name[: -len("_report.json")]
        reports.append((label, json.loads(path.read_text())))
    return reports


def _round_index(label: str) -> int | None:
    if label.startswith("warmstart") or label.startswith("baseline"):
        return 0
    m = re.search(r"round(\d+)", label)
    return int(m.group(1)) if m else None


def build_report(run_dirs: list[Path], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    curves: dict[str, list[tuple[int, dict]]] = {}
    for run_dir in run_dirs:
        if not run_dir.is_dir():
            raise FileNotFoundError(f"run directory {run_dir!s} does not exist")
        reports = _load_reports(run_dir)
        if not reports:
            raise FileNotFoundError(f"no *_report.json aggregates under {run_dir!s}")
        for label, rep in reports:
            rows.append((f"{run_dir.name}/{label}", rep))
            idx = _round_index(label)
            if idx is not None:
                curves.setdefault(run_dir.name, []).append((idx, rep))

    lines = [
        "| Run | KID | PSNR (dB) | AA@15deg | IoU@0.7 |",
        "| --- | --- | --- | --- | --- |",
    ]
    for label, rep in rows:
        lines.append(
            "| {l} | {kid:.4f} | {psnr:.4f} | {aa:.2f}% | {iou:.2f}% |".format(
                l=label,
                kid=rep["kid"],
                psnr=rep["psnr_mean"],
                aa=100 * rep["aa"]["15.0"],
                iou=100 * rep["iou_at"]["0.7"],
            )
        )
    table_path = out / "summary.md"
    table_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written = [table_path]

    metrics = [
        ("psnr", "PSNR (dB)", lambda r: r["psnr_mean"]),
        ("aa15", "AA@15deg", lambda r: 100 * r["aa"]["15.0"]),
        ("iou07", "IoU@0.7 (%)", lambda r: 100 * r["iou_at"]["0.7"]),
    ]
    for key, ylabel, getter in metrics:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for run_name, points in sorted(curves.items()):
            points = sorted(points)
            ax.plot([p[0] for p in points], [getter(p[1]) for p in points],
                    marker="o", label=run_name)
        ax.set_xlabel("round")
        ax.set_ylabel(ylabel)
        if curves:
            ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"{key}_per_round.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
