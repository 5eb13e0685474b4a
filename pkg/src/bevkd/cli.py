"""Command-line entry points: data generation, teacher training,
distillation runs and ablation sweeps.

Every flag mirrors a RunConfig field (same name, dashes for underscores)
and shows its default in --help. All commands honor --seed(s) and are
bit-reproducible; the default output directory comes from $BEVKD_OUT.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .pipeline import (TeacherConvergenceError, NaNLossError, evaluate_model,
                       build_model_config, mean_nds_by_strategy,
                       run_ablation_axis, run_experiment, save_teacher,
                       train_teacher)
from .run_config import DEFAULT_OUT_ENV, ConfigError, RunConfig
from .scenes import SceneSpec, generate_dataset, make_grid, write_dataset

AXES = ("table3", "table4", "table5", "table6")


def _add_run_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per RunConfig field, defaults pulled from the dataclass."""
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if f.name == "seeds":
            parser.add_argument(flag, type=int, nargs="+",
                                default=list(default),
                                help="training seeds (default: %(default)s)")
        elif f.type == "bool" or isinstance(default, bool):
            parser.add_argument(flag, type=_parse_bool, default=default,
                                metavar="{true,false}",
                                help=f"(default: %(default)s)")
        elif isinstance(default, float):
            parser.add_argument(flag, type=float, default=default,
                                help="(default: %(default)s)")
        elif isinstance(default, int):
            parser.add_argument(flag, type=int, default=default,
                                help="(default: %(default)s)")
        else:
            parser.add_argument(flag, type=str, default=default,
                                help="(default: %(default)s)")


def _parse_bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            data.update(json.load(fh))
    defaults = RunConfig.field_defaults()
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f.name, None)
        if f.name == "seeds":
            value = tuple(value) if value is not None else None
            default = defaults[f.name]
        else:
            default = defaults[f.name]
        # explicit flags override the config file; untouched defaults do not
        if value is not None and value != default:
            data[f.name] = value
        elif f.name not in data:
            data[f.name] = value if value is not None else default
    if isinstance(data.get("seeds"), list):
        data["seeds"] = tuple(data["seeds"])
    return RunConfig.from_dict(data)


def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = SceneSpec(min_boxes=args.min_boxes, max_boxes=args.max_boxes,
                     num_classes=args.num_classes, noise_std=args.noise_std)
    grid = make_grid(args.grid_cells, args.grid_extent)
    scenes = generate_dataset(args.seed, args.count, grid, spec)
    digest = write_dataset(scenes, args.out, inline_arrays=args.inline)
    print(f"sha256:{digest}  {args.out}  {len(scenes)} scenes")
    return 0


def cmd_train_teacher(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    from .pipeline import load_or_generate_scenes
    train_scenes, eval_scenes = load_or_generate_scenes(cfg)
    grid = train_scenes[0].grid
    seed = cfg.seeds[0]
    teacher = train_teacher(
        train_scenes, cfg.teacher_epochs, seed, grid=grid,
        model_config=build_model_config(cfg), lr=cfg.lr,
        clip_norm=cfg.clip_norm, eval_scenes=eval_scenes,
        nds_floor=cfg.teacher_nds_floor)
    save_teacher(args.out, teacher, build_model_config(cfg))
    report = teacher.eval_report
    with open(args.out + ".metrics.json", "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh)
    print(f"teacher checkpoint: {args.out}")
    print(f"toy_nds={report.toy_nds:.4f} toy_map={report.toy_map:.4f} "
          f"mate={report.mate:.3f} mase={report.mase:.3f} "
          f"maoe={report.maoe:.3f} mave={report.mave:.3f}")
    return 0


def cmd_distill(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    if cfg.teacher:
        for seed in cfg.seeds:
            path = cfg.teacher.format(seed=seed)
            if not os.path.exists(path):
                raise FileNotFoundError(f"teacher checkpoint not found: {path}")
    record = run_experiment(cfg)
    for run in record["runs"]:
        m = run["metrics"]
        print(f"{run['run_id']}: toy_nds={m['toy_nds']:.4f} "
              f"toy_map={m['toy_map']:.4f}")
    out_dir = cfg.resolved_out_dir()
    print(f"results: {os.path.join(out_dir, 'results-' + cfg.strategy_label())}"
          f".json / .csv")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    if not args.axis:
        raise ConfigError("at least one --axis is required")
    cfg = _config_from_args(args)
    for axis in args.axis:
        if axis not in AXES:
            raise ConfigError(f"unknown axis {axis!r}; choose from {AXES}")
        result = run_ablation_axis(axis, cfg)
        means = mean_nds_by_strategy(result)
        spreads = _nds_spreads(result)
        print(f"== {axis} (mean toy-NDS over seeds {list(cfg.seeds)}) ==")
        for rec in result["records"]:
            label = rec["runs"][0]["strategy"]
            print(f"  {label:24s} {100 * means[label]:6.2f} "
                  f"± {100 * spreads[label]:4.2f}")
        print(f"  table: {os.path.join(cfg.resolved_out_dir(), f'ablation-{axis}.csv')}")
    return 0


def _nds_spreads(axis_record: dict) -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for rec in axis_record["records"]:
        for run in rec["runs"]:
            groups.setdefault(run["strategy"], []).append(run["metrics"]["toy_nds"])
    return {k: float(np.std(v)) for k, v in groups.items()}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevkd",
        description="Cross-modal BEV knowledge distillation on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a scene dataset file",
                         formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--out", type=str, required=True)
    gen.add_argument("--grid-cells", type=int, default=64)
    gen.add_argument("--grid-extent", type=float, default=64.0)
    gen.add_argument("--min-boxes", type=int, default=1)
    gen.add_argument("--max-boxes", type=int, default=12)
    gen.add_argument("--num-classes", type=int, default=4)
    gen.add_argument("--noise-std", type=float, default=0.08)
    gen.add_argument("--inline", action="store_true",
                     help="inline the modality arrays instead of the "
                          "regenerate-from-seed flag")
    gen.set_defaults(func=cmd_gen_data)

    teach = sub.add_parser("train-teacher", help="train and freeze a teacher",
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    teach.add_argument("--out", type=str, required=True)
    teach.add_argument("--config", type=str, default=None,
                       help="JSON RunConfig file")
    _add_run_config_flags(teach)
    teach.set_defaults(func=cmd_train_teacher)

    dist = sub.add_parser("distill", help="run one distillation configuration",
                          formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    dist.add_argument("--config", type=str, default=None,
                      help="JSON RunConfig file; flags override it")
    _add_run_config_flags(dist)
    dist.set_defaults(func=cmd_distill)

    abl = sub.add_parser("ablate", help="run ablation axes",
                         formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    abl.add_argument("--axis", action="append", choices=AXES,
                     help="axis to sweep; repeatable")
    abl.add_argument("--config", type=str, default=None)
    _add_run_config_flags(abl)
    abl.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError,
            TeacherConvergenceError, NaNLossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
