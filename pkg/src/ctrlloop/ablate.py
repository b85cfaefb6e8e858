"""Ablation grids: train every cell from one shared warm-start checkpoint,
evaluate, and emit per-axis comparison tables.

A grid is a JSON object mapping axis names to value lists; cells are the
cross product of the enabled axes and differ from the base config only in
those values. The warm start is trained once with the base config; each
cell then runs one round (its own strategy/loss/steps) on top of it. Cells
whose training or evaluation fails are recorded as failed rather than
dropped, since some configurations (pixel-space consistency loss in
particular) are expected to be able to diverge.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import shutil
import traceback
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_from_dict, config_to_dict
from .data import TripletDataset
from .metrics import MetricsReport, evaluate, write_report
from .rng import derive_seed
from .train import init_state, load_state, run_phase, save_state, train

AXES = ("cl_denoise_steps", "loss_mode", "strategy", "seed")


class GridError(ValueError):
    pass


def load_grid(path: str | Path) -> dict[str, list]:
    grid = json.loads(Path(path).read_text())
    validate_grid(grid)
    return grid


def validate_grid(grid: dict) -> None:
    if not isinstance(grid, dict) or not grid:
        raise GridError("grid must be a non-empty JSON object")
    for axis, values in grid.items():
        if axis not in AXES:
            raise GridError(f"unknown axis {axis!r}; valid axes: {AXES}")
        if not isinstance(values, list) or not values:
            raise GridError(f"axis {axis!r} needs a non-empty value list")


def grid_cells(grid: dict) -> list[dict]:
    axes = sorted(grid)
    return [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]


def cell_name(cell: dict) -> str:
    return "__".join(f"{k}={v}" for k, v in sorted(cell.items()))


def cell_config(base: ExperimentConfig, cell: dict) -> ExperimentConfig:
    d = config_to_dict(base)
    for axis, value in cell.items():
        d["train"][axis] = value
    return config_from_dict(d)


def run_cell(base: ExperimentConfig, cell: dict, warm_ckpt: Path, dataset: TripletDataset,
             cell_dir: Path) -> MetricsReport:
    cfg = cell_config(base, cell)
    state = load_state(warm_ckpt)
    state.config = cfg
    if "seed" in cell and cell["seed"] != base.train.seed:
        # the warm start stays shared; only post-warm-start randomness varies
        state.gen.manual_seed(derive_seed(cell["seed"], "cell-noise"))
        state.batch_rng = np.random.default_rng(derive_seed(cell["seed"], "cell-batches"))

    if cfg.train.strategy == "alternating":
        run_phase(state, dataset, "CL", cfg.train.m_cl)
        run_phase(state, dataset, "SM", cfg.train.n_sm)
    elif cfg.train.strategy == "simultaneous":
        run_phase(state, dataset, "SIMUL", cfg.train.m_cl + cfg.train.n_sm)
    else:
        raise GridError(f"strategy {cfg.train.strategy!r} is not an ablation cell strategy")
    state.completed_rounds = 1
    cell_dir.mkdir(parents=True, exist_ok=True)
    save_state(state, cell_dir / "round001.ckpt", "round1")

    eval_cfg = cfg.eval
    if "seed" in cell:
        eval_cfg = dataclasses.replace(eval_cfg, gen_seed=derive_seed(cell["seed"], "eval-gen"))
    report = evaluate(state.bundle, state.sched, dataset, eval_cfg,
                      meta={"cell": cell_name(cell)})
    write_report(report, cell_dir, label="cell")
    return report


def _axis_table(axis: str, grid: dict, results: list[dict]) -> str:
    """Markdown table for one axis, medians over the other enabled axes."""
    if axis == "seed":
        seeds = grid[axis]
        header = "| Metric | " + " | ".join(f"seed {s}" for s in seeds) + " |"
        sep = "| --- |" + " --- |" * len(seeds)
        psnr_row, iou_row = ["| PSNR (dB) |"], ["| IoU@0.7 |"]
        for s in seeds:
            vals = [r for r in results if r["cell"].get(axis) == s]
            ok = [r for r in vals if r["status"] == "ok"]
            psnr_row.append(f" {np.median([r['psnr'] for r in ok]):.4f} |" if ok else " failed |")
            iou_row.append(f" {100 * np.median([r['iou07'] for r in ok]):.2f}% |" if ok else " failed |")
        return "\n".join([header, sep, "".join(psnr_row), "".join(iou_row)]) + "\n"

    lines = [
        f"| {axis} | KID | PSNR (dB) | AA@15deg | IoU@0.7 | cells |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    for value in grid[axis]:
        rows = [r for r in results if r["cell"].get(axis) == value]
        ok = [r for r in rows if r["status"] == "ok"]
        failed = len(rows) - len(ok)
        tag = f"{len(ok)} ok" + (f", {failed} failed" if failed else "")
        if ok:
            lines.append(
                "| {v} | {kid:.4f} | {psnr:.4f} | {aa:.2f}% | {iou:.2f}% | {tag} |".format(
                    v=value,
                    kid=float(np.median([r["kid"] for r in ok])),
                    psnr=float(np.median([r["psnr"] for r in ok])),
                    aa=100 * float(np.median([r["aa15"] for r in ok])),
                    iou=100 * float(np.median([r["iou07"] for r in ok])),
                    tag=tag,
                )
            )
        else:
            lines.append(f"| {value} | failed | failed | failed | failed | {tag} |")
    return "\n".join(lines) + "\n"


def run_ablation(base: ExperimentConfig, grid: dict, data_dir: str | Path,
                 out_dir: str | Path) -> list[Path]:
    """Train/evaluate the full grid; returns the written table paths."""
    validate_grid(grid)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    warm_dir = out / "warmstart"
    warm_cfg_d = config_to_dict(base)
    warm_cfg_d["train"]["rounds"] = 0
    warm_ckpt, _ = train(config_from_dict(warm_cfg_d), data_dir, warm_dir)

    dataset = TripletDataset(data_dir)
    results = []
    for cell in grid_cells(grid):
        name = cell_name(cell)
        entry: dict = {"cell": cell, "name": name}
        try:
            report = run_cell(base, cell, warm_ckpt, dataset, out / "cells" / name)
            entry.update(
                status="ok",
                kid=report.kid,
                psnr=report.psnr_mean,
                aa15=report.aa.get(15.0, float("nan")),
                iou07=report.iou_at.get(0.7, float("nan")),
            )
        except Exception as e:  # failed cells are reported, not skipped
            entry.update(status="failed", error=f"{type(e).__name__}: {e}")
            entry["traceback"] = traceback.format_exc()
        results.append(entry)

    (out / "cells.json").write_text(json.dumps(results, indent=2, sort_keys=True, default=str) + "\n")
    table_paths = []
    for axis in sorted(grid):
        path = out / f"table_{axis}.md"
        path.write_text(_axis_table(axis, grid, results), encoding="utf-8")
        table_paths.append(path)
    return table_paths
