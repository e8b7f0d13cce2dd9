"""Command-line entry point: dataset generation, training, evaluation,
ablations, and chart emission, all reproducible from an echoed config."""

from __future__ import annotations

import argparse
import csv
import re
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import experiments, svgplot
from .config import ConfigError
from .data import (DatasetError, generate_synthetic_dataset, load_dataset,
                   make_fold_splits, save_dataset)
from .model import (CheckpointError, init_params, load_checkpoint,
                    save_checkpoint)
from .netpbm import NetpbmError
from .train import train


class CliError(RuntimeError):
    pass


def _overrides_from_sets(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise CliError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_cfg(args, extra: dict | None = None) -> dict:
    overrides = _overrides_from_sets(getattr(args, "set", None))
    if getattr(args, "dataset", None):
        overrides["dataset"] = args.dataset
    if getattr(args, "out_dir", None):
        overrides["out_dir"] = args.out_dir
    if extra:
        overrides.update({k: v for k, v in extra.items() if v is not None})
    return cfgmod.load_config(getattr(args, "config", None), overrides)


def _dataset_and_folds(cfg: dict):
    if not cfg["dataset"]:
        raise CliError("no dataset configured (set 'dataset' or pass --dataset)")
    ds = load_dataset(cfg["dataset"])
    folds = make_fold_splits(ds.categories, cfg["num_folds"])
    return ds, folds


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    if args.categories < 8:
        raise CliError(f"--categories must be at least 8, got {args.categories}")
    ds = generate_synthetic_dataset(args.categories, args.per_class,
                                    args.size, args.seed)
    manifest = save_dataset(ds, args.out)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    ds, folds = _dataset_and_folds(cfg)
    if not 0 <= args.fold < len(folds):
        raise CliError(f"--fold {args.fold} out of range for {len(folds)} folds")
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.echo_config(cfg, out_dir / "config.echo")

    rows: list[tuple] = []
    params = train(ds, folds[args.fold], cfgmod.train_config(cfg), log_rows=rows)
    save_checkpoint(params, out_dir / f"fold{args.fold}.ckpt")
    with open(out_dir / "train_log.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "step", "l_qm", "l_sm", "l_qm_sub",
                         "l_sm_sub", "total", "miou"])
        writer.writerows(rows)
    last_epoch = rows[-1][0] if rows else 0
    final = [r[7] for r in rows if r[0] == last_epoch]
    print(f"fold {args.fold}: final train mIoU "
          f"{float(np.mean(final)) if final else float('nan'):.4f}")
    print(out_dir / f"fold{args.fold}.ckpt")
    return 0


def _selected_folds(arg: str, n: int) -> list[int]:
    if arg == "all":
        return list(range(n))
    try:
        picks = [int(t) for t in arg.split(",")]
    except ValueError:
        raise CliError(f"--fold expects 'all' or comma-separated ints, got {arg!r}")
    for f in picks:
        if not 0 <= f < n:
            raise CliError(f"fold {f} out of range for {n} folds")
    return picks


def cmd_eval(args) -> int:
    extra = {}
    if args.k is not None:
        extra["k"] = str(args.k)
    if args.mode:
        extra["mode"] = args.mode
    if args.scales:
        extra["scales"] = args.scales
    if args.refine_iters is not None:
        extra["refine_iterations"] = str(args.refine_iters)
    if args.annotation:
        extra["annotation"] = args.annotation
    if args.episodes is not None:
        extra["episodes_per_fold"] = str(args.episodes)
    cfg = _load_cfg(args, extra)
    ds, folds = _dataset_and_folds(cfg)
    out_dir = Path(cfg["out_dir"])
    picks = _selected_folds(args.fold, len(folds))

    mcfg = cfgmod.model_config(cfg)
    params_per_fold = {}
    for fold in picks:
        ckpt = out_dir / f"fold{fold}.ckpt"
        if not ckpt.exists():
            raise CliError(f"missing checkpoint {ckpt}")
        params_per_fold[fold] = load_checkpoint(init_params(mcfg, cfg["seed"]), ckpt)

    scales = tuple(cfg["scales"])
    use_scales = scales if len(scales) > 1 or scales[0] != 1.0 else None
    variant = cfg["mode"]
    if cfg["annotation"] == "bbox":
        variant += "+bbox"
    if use_scales:
        variant += "+ms"

    rows = []
    for fold in picks:
        res = experiments.evaluate(
            params_per_fold[fold], mcfg, ds, folds[fold],
            episodes=cfg["episodes_per_fold"], seed=cfg["eval_seed"],
            fold=fold, k=cfg["k"], mode=cfg["mode"], scales=use_scales,
            refine_iterations=cfg["refine_iterations"],
            annotation=cfg["annotation"],
            finetune_cfg=cfgmod.finetune_config(cfg))
        rows.append({"fold": fold, "variant": variant, "miou": res["miou"],
                     "fbiou": res["fbiou"], "episodes": cfg["episodes_per_fold"],
                     "seed": cfg["eval_seed"]})
    rows.append({"fold": "mean", "variant": variant,
                 "miou": float(np.mean([r["miou"] for r in rows])),
                 "fbiou": float(np.mean([r["fbiou"] for r in rows])),
                 "episodes": cfg["episodes_per_fold"], "seed": cfg["eval_seed"]})

    out_dir.mkdir(parents=True, exist_ok=True)
    out_csv = Path(args.out) if args.out else out_dir / "eval.csv"
    experiments.write_csv(out_csv, rows)
    cfgmod.echo_config(cfg, out_dir / "eval.echo")
    print(f"{variant}: mean mIoU {rows[-1]['miou']:.4f} "
          f"FBIoU {rows[-1]['fbiou']:.4f}")
    print(out_csv)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args, {"episodes_per_fold": str(args.episodes)
                           if args.episodes is not None else None})
    if args.axis not in experiments.ABLATION_AXES:
        raise CliError(f"unknown axis {args.axis!r}; valid: "
                       f"{', '.join(experiments.ABLATION_AXES)}")
    ds, folds = _dataset_and_folds(cfg)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.echo_config(cfg, out_dir / f"ablate_{args.axis}.echo")
    rows = experiments.ablation_run(
        ds, folds, cfgmod.train_config(cfg), args.axis,
        episodes_per_fold=cfg["episodes_per_fold"], eval_seed=cfg["eval_seed"],
        finetune_cfg=cfgmod.finetune_config(cfg))
    out_csv = out_dir / f"ablate_{args.axis}.csv"
    experiments.write_csv(out_csv, rows)
    for variant in dict.fromkeys(r["variant"] for r in rows):
        mean = [r for r in rows if r["variant"] == variant and r["fold"] == "mean"]
        if mean:
            print(f"{variant}: mean mIoU {mean[0]['miou']:.4f}")
    print(out_csv)
    return 0


def cmd_plot(args) -> int:
    path = Path(args.csv)
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}")
    if not rows:
        raise CliError(f"{path}: no data rows")
    if not {"variant", "miou", "fold"} <= set(rows[0] or {}):
        raise CliError(f"{path}: expected header with fold,variant,miou columns")
    mean_rows = [r for r in rows if r["fold"] == "mean"] or rows
    iters = [re.fullmatch(r"iters_(\d+)", r["variant"]) for r in mean_rows]
    if all(iters):
        pts = [(int(m.group(1)), float(r["miou"]))
               for m, r in zip(iters, mean_rows)]
        svg = svgplot.line_chart({"mIoU": pts}, title=path.stem,
                                 xlabel="refinement iterations", ylabel="mIoU")
    else:
        labels = [r["variant"] for r in mean_rows]
        values = [float(r["miou"]) for r in mean_rows]
        svg = svgplot.bar_chart(labels, values, title=path.stem,
                                xlabel="variant", ylabel="mIoU")
    out = Path(args.out) if args.out else path.with_suffix(".svg")
    out.parent.mkdir(parents=True, exist_ok=True)
    svgplot.save_svg(svg, out)
    print(out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crcseg",
        description="few-shot shape segmentation: data, training, evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shape dataset")
    p.add_argument("--categories", type=int, default=12)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--dataset", help="dataset directory or manifest")
        p.add_argument("--out-dir", help="run directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key")

    p = sub.add_parser("train", help="train one fold")
    common(p)
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained folds")
    common(p)
    p.add_argument("--fold", default="all", help="'all' or comma-separated ids")
    p.add_argument("--k", type=int)
    p.add_argument("--mode", choices=experiments.EVAL_MODES)
    p.add_argument("--scales", help="comma-separated, e.g. 0.75,1.0,1.25")
    p.add_argument("--refine-iters", type=int)
    p.add_argument("--annotation", choices=experiments.ANNOTATIONS)
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation axis")
    common(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render a metrics CSV as SVG")
    p.add_argument("--csv", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, DatasetError, NetpbmError, CheckpointError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
