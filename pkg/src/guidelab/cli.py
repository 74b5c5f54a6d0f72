"""Command line entry point: ``guidelab <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys

import numpy as np
import yaml

from . import analysis, harness, tasks
from .config import ConfigError, from_dict, merge


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON experiment config")
    p.add_argument("--experiment-id")
    p.add_argument("--task", choices=tasks.TASKS)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--optimizer", choices=("adam", "adamw"))
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--task-loss", choices=("cross_entropy", "bce", "mse"))
    p.add_argument("--out-dir")
    p.add_argument("--guide-checkpoint")
    p.add_argument("--guide-mode", choices=("trained", "untrained", "noise", "none"))
    p.add_argument("--metric", choices=("cka", "rsa"))
    p.add_argument("--disconnect-after-steps", type=int)
    p.add_argument("--log-wall-time", action="store_true", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; dotted keys reach nested fields, VALUE is YAML")


_TOP = ("experiment_id", "task", "lr", "batch_size", "epochs", "seeds", "optimizer", "weight_decay",
        "grad_clip", "task_loss", "out_dir", "guide_checkpoint", "log_wall_time")
_GUIDANCE = ("guide_mode", "metric", "disconnect_after_steps")


def _overrides(args) -> dict:
    over: dict = {}
    for k in _TOP:
        v = getattr(args, k, None)
        if v is not None:
            over[k] = v
    g = {k: getattr(args, k) for k in _GUIDANCE if getattr(args, k, None) is not None}
    if g:
        over["guidance"] = g
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        node = over
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(val)
    return over


def _config(args, force_mode: str | None = None):
    base = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            base = yaml.safe_load(fh) or {}
    d = merge(base, _overrides(args))
    if force_mode == "none":
        d.setdefault("guidance", {})["guide_mode"] = "none"
        d.pop("guide_spec", None)
        d.pop("guide_checkpoint", None)
    return from_dict(d)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def _progress(rec) -> None:
    print(f"seed {rec.seed} epoch {rec.epoch:3d} step {rec.step:6d} train {rec.train_total:.4f} "
          f"(task {rec.train_task:.4f}, dissim {rec.train_dissim:.4f}) val {rec.val_loss:.4f} "
          f"metric {rec.val_metric:.4f}", file=sys.stderr, flush=True)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    if args.task == "copy":
        split = tasks.gen_copy_paste(args.n, tuple(args.len_range or (20, 40)), seed=args.seed)
    elif args.task == "parity":
        split = tasks.gen_parity(args.n, tuple(args.len_range or (2, 50)), seed=args.seed)
    elif args.task == "lm":
        if not args.corpus:
            raise tasks.DataError("--corpus is required for lm")
        split = tasks.build_lm_dataset(args.corpus, args.context_len, seed=args.seed)
    elif args.gimg:
        split = tasks.load_image_dataset(args.gimg, args.seed, args.classes)
    else:
        spec = tasks.SynthImageSpec(args.classes or 4, args.image_size, args.n, args.channels, args.noise)
        split = tasks.load_image_dataset(spec, args.seed)
    man = tasks.save_split(split, args.out)
    man.pop("ids", None)
    _print(man)
    return 0


def _run(cfg) -> harness.RunSummary:
    s = harness.run_experiment(cfg, progress=_progress)
    _print(s.to_dict())
    return s


def cmd_train(args) -> int:
    _run(_config(args, force_mode="none"))
    return 0


def cmd_train_guide(args) -> int:
    cfg = _config(args, force_mode="none")
    s = _run(cfg)
    # the guide is the best-val checkpoint of the seed with the lowest minimum val loss
    exp = os.path.join(cfg.out_dir, cfg.experiment_id)
    best_seed = min(s.seeds, key=lambda sd: (min(_seed_val(exp, sd)), sd))
    out = args.output or os.path.join(exp, "guide.glab")
    shutil.copyfile(os.path.join(exp, f"seed_{best_seed}", "best.glab"), out)
    print(f"guide checkpoint: {out}", file=sys.stderr)
    return 0


def _seed_val(exp_dir, seed):
    rows = harness.read_log(os.path.join(exp_dir, f"seed_{seed}", "log.csv"))
    return [r["total_loss"] for r in rows if r["split"] == "val"]


def cmd_guide(args) -> int:
    cfg = _config(args)
    if not cfg.guidance.enabled:
        raise ConfigError("guide needs guidance.guide_mode other than none (use train for baselines)")
    _run(cfg)
    return 0


def cmd_sweep_lr(args) -> int:
    cfg = _config(args)
    chosen, table = harness.lr_sweep(cfg, args.lrs or harness.DEFAULT_LRS, count=len(args.lrs or harness.DEFAULT_LRS))
    res = {"chosen_lr": chosen, "val_loss": {f"{k:g}": v for k, v in table.items()}}
    path = os.path.join(cfg.out_dir, f"{cfg.experiment_id}_sweep", "sweep.json")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(res, fh, indent=2, sort_keys=True)
    _print(res)
    return 0


def cmd_eval(args) -> int:
    net, ck = harness.load_network(args.checkpoint)
    net.mode = "eval"
    if args.data_dir:
        split = tasks.load_split(args.data_dir)
    elif args.config:
        split = harness.load_task_data(_config(args))
    else:
        raise ConfigError("eval needs --data-dir or --config for the data")
    task = split.task
    ds = getattr(split, args.split)
    res = harness.evaluate(net, ds, task, args.task_loss_eval, return_logits=bool(args.predictions))
    if args.predictions:
        if task not in ("parity", "image"):
            raise ConfigError("--predictions is only available for classification tasks")
        ps = analysis.PredictionSet.from_logits(ds.ids, np.concatenate(res.pop("logits")), ds.y)
        ps.save(args.predictions)
    _print({"checkpoint": args.checkpoint, "split": args.split, "task": task, **res})
    return 0


def cmd_compare_errors(args) -> int:
    r = analysis.error_consistency(analysis.PredictionSet.load(args.a), analysis.PredictionSet.load(args.b))
    _print({"c_obs": r.c_obs, "c_exp": r.c_exp, "kappa": r.kappa})
    return 0


def cmd_plot(args) -> int:
    series = []
    for p in args.logs:
        series += analysis.extract_dissim_curves([p], column=args.column)
    fmt = args.format or ("svg" if args.out.endswith(".svg") else "csv")
    analysis.emit_curves(series, fmt, args.out, title=args.title or "", ylabel=args.column.replace("_", " "))
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="guidelab", description="Guided training laboratory")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="generate or ingest a dataset split")
    p.add_argument("--task", choices=tasks.TASKS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--len-range", type=int, nargs=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus")
    p.add_argument("--context-len", type=int, default=50)
    p.add_argument("--gimg", help="ingest an existing GIMG file instead of synthesising")
    p.add_argument("--classes", type=int)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(fn=cmd_gen_data)

    for name, fn, hlp in (("train", cmd_train, "baseline training (no guidance)"),
                          ("train-guide", cmd_train_guide, "train a network to serve as a guide"),
                          ("guide", cmd_guide, "guided training"),
                          ("sweep-lr", cmd_sweep_lr, "learning-rate sweep")):
        p = sub.add_parser(name, help=hlp)
        _add_config_flags(p)
        if name == "train-guide":
            p.add_argument("--output", help="where to copy the selected guide checkpoint")
        if name == "sweep-lr":
            p.add_argument("--lrs", type=float, nargs="+")
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--task-loss-eval", default="cross_entropy", choices=("cross_entropy", "bce", "mse"))
    p.add_argument("--predictions", help="write per-example predictions CSV (classification tasks)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compare-errors", help="error consistency (kappa) of two prediction files")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(fn=cmd_compare_errors)

    p = sub.add_parser("plot", help="training curves from log CSVs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "svg"))
    p.add_argument("--column", default="dissim_loss",
                   choices=("dissim_loss", "total_loss", "task_loss", "metric"))
    p.add_argument("--title")
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, tasks.DataError, harness.RunError, harness.SweepError,
            analysis.AnalysisError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
