"""Command-line entry points.

Commands: gen-data, train, eval, ablate, report. Every command takes
--config (JSON file), --set KEY=VALUE dotted overrides, --seed (shorthand
for overriding every section seed), --deterministic (single-worker mode,
one torch thread), and --out. Exit codes: 0 success, 1 validation error,
2 runtime/numerical failure, 3 IO error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, config_to_dict, load_config

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_IO = 3

DATA_DIR_ENV = "CTRLLOOP_DATA_DIR"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted-path config override, e.g. train.rounds=2")
    p.add_argument("--seed", type=int, default=None,
                   help="override dataset/train/eval seeds at once")
    p.add_argument("--deterministic", action="store_true",
                   help="single-worker deterministic mode (one torch thread)")
    p.add_argument("--out", type=Path, default=None, help="output directory")


def _resolve_config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [
            f"dataset.seed={args.seed}",
            f"train.seed={args.seed}",
            f"eval.gen_seed={args.seed}",
        ]
    return load_config(args.config, overrides)


def _apply_determinism(args) -> None:
    if args.deterministic:
        import torch

        torch.set_num_threads(1)


def _data_dir(args) -> Path:
    if args.data_dir is not None:
        return args.data_dir
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise ConfigError(f"no data directory: pass --data-dir or set {DATA_DIR_ENV}")


def cmd_gen_data(args) -> int:
    from .sceneforge import build_dataset

    cfg = _resolve_config(args)
    out = args.out or _data_dir(args)
    ds = cfg.dataset
    build_dataset(ds.n_objects, ds.n_views, ds.resolution, ds.seed, out)
    print(out / "manifest.json")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = _resolve_config(args)
    _apply_determinism(args)
    if args.out is None:
        raise ConfigError("train requires --out")
    final, _log = train(cfg, _data_dir(args), args.out, resume=not args.no_resume)
    print(final)
    return EXIT_OK


def cmd_eval(args) -> int:
    import torch

    from .data import TripletDataset
    from .metrics import evaluate, write_report
    from .train import load_state

    cfg = _resolve_config(args)
    _apply_determinism(args)
    if args.out is None:
        raise ConfigError("eval requires --out")
    state = load_state(args.checkpoint)
    data_dir = _data_dir(args)
    dataset = TripletDataset(data_dir, dtype=state.dtype)
    if args.split:
        split = args.split
    else:
        split = "train" if dataset.manifest.seed == state.config.dataset.seed else "heldout"
    report = evaluate(state.bundle, state.sched, dataset, cfg.eval, split=split)
    paths = write_report(report, args.out, label=args.label)
    print(paths["aggregate"])
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablate import load_grid, run_ablation

    cfg = _resolve_config(args)
    _apply_determinism(args)
    if args.out is None:
        raise ConfigError("ablate requires --out")
    grid = load_grid(args.grid)
    tables = run_ablation(cfg, grid, _data_dir(args), args.out)
    for path in tables:
        print(path)
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import build_report

    if args.out is None:
        raise ConfigError("report requires --out")
    if not args.run_dirs:
        raise ConfigError("report requires at least one run directory")
    paths = build_report([Path(d) for d in args.run_dirs], args.out)
    for path in paths:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctrlloop")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a procedural multi-view dataset")
    _add_common(p)
    p.add_argument("--data-dir", type=Path, default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train (warm start + rounds), resumable")
    _add_common(p)
    p.add_argument("--data-dir", type=Path, default=None)
    p.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--data-dir", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=["train", "heldout"], default=None,
                   help="override the split label (default: inferred from seeds)")
    p.add_argument("--label", default="eval", help="file-name stem for reports")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate an ablation grid from one warm start")
    _add_common(p)
    p.add_argument("--data-dir", type=Path, default=None)
    p.add_argument("--grid", type=Path, required=True, help="JSON {axis: [values...]}")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="markdown tables and metric plots for finished runs")
    _add_common(p)
    p.add_argument("run_dirs", nargs="*", help="directories holding eval reports")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, PermissionError, IsADirectoryError, json.JSONDecodeError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
