"""Command line entry point: ``sida {train,eval,ablate,compare,plot,teacher,presets}``.

Exit codes: 0 ok, 2 config or validation error, 3 numeric failure.
Run directories default to ``$SIDA_OUTPUT_ROOT/<name>`` (``./runs`` when unset).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import torch

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import checkpoint as ckpt
from . import config as config_mod
from . import presets, sweeps
from .diffmath import NumericFailure, set_deterministic
from .metrics import metric_report
from .plots import line_chart
from .schedule import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
OUTPUT_ROOT_ENV = "SIDA_OUTPUT_ROOT"

log = logging.getLogger("sida")


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v.strip())
    for flag, key in (("mode", "train.mode"), ("budget", "train.budget"), ("seed", "train.seed"),
                      ("alpha", "loss.alpha"), ("sid_checkpoint", "train.sid_checkpoint")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def load_config(args) -> config_mod.TrainConfig:
    ov = _overrides(args)
    if getattr(args, "preset", None):
        if getattr(args, "config", None):
            raise ConfigError("give either a config file or --preset, not both")
        return presets.preset(args.preset, **ov)
    if not getattr(args, "config", None):
        raise ConfigError("a config file or --preset is required")
    return config_mod.load(args.config, ov)


def _out_dir(args, cfg) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / (cfg.name or cfg.hash()[:12])


# -- subcommands --------------------------------------------------------------


def cmd_train(args) -> int:
    from .trainer import run_training

    cfg = load_config(args)
    out = _out_dir(args, cfg)
    res = run_training(cfg, out)
    print(json.dumps({"out_dir": str(out), "final_energy_distance": res.final_metric}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import build_data, load_generator, generate_from
    from .analytic import gmm_sample

    cfg = load_config(args)
    net, meta = load_generator(cfg, args.checkpoint)
    if meta.get("config_hash") != cfg.hash():
        raise ConfigError(
            f"checkpoint {args.checkpoint} was written under config hash {meta.get('config_hash')!r}, "
            f"which does not match {cfg.hash()!r}"
        )
    n = args.samples or cfg.eval.final_samples
    seed = cfg.eval.seed if args.eval_seed is None else args.eval_seed
    data = build_data(cfg)
    fake = generate_from(net, cfg, data.dim, n, seed + 1)
    real = gmm_sample(data, n, torch.Generator().manual_seed(seed))
    report = metric_report(fake, real, seed=seed).to_dict()
    report["checkpoint"] = str(args.checkpoint)
    report["images_seen"] = meta.get("images_seen")
    line = json.dumps(report, sort_keys=True)
    print(line)
    log_path = Path(args.log) if args.log else Path(args.checkpoint).parent / "eval-log.jsonl"
    prev = log_path.read_text() if log_path.exists() else ""
    ckpt.atomic_write_text(log_path, prev + line + "\n")
    return EXIT_OK


def _sweep_cfg(args):
    cfg = load_config(args)
    return cfg, _out_dir(args, cfg), args.workers or cfg.sweep.workers


def cmd_ablate(args) -> int:
    cfg, out, workers = _sweep_cfg(args)
    if not cfg.sweep.alphas or not cfg.sweep.seeds:
        raise ConfigError("sweep.alphas and sweep.seeds must be nonempty for ablate")
    cells = sweeps.ablate_alpha(cfg, cfg.sweep.alphas, cfg.sweep.seeds, workers, out / "cells")
    summary = sweeps.ablation_summary(cells)
    sweeps.write_outputs(out, "ablation", cells, summary, sweeps.ablation_chart(cells))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg, out, workers = _sweep_cfg(args)
    if not cfg.sweep.modes or not cfg.sweep.seeds:
        raise ConfigError("sweep.modes and sweep.seeds must be nonempty for compare")
    rep = sweeps.compare_convergence(
        cfg, cfg.sweep.modes, cfg.sweep.seeds, cfg.sweep.threshold, workers, out / "cells"
    )
    summary = {k: v for k, v in rep.to_dict().items() if k != "cells"}
    sweeps.write_outputs(out, "compare", rep.cells, summary, sweeps.convergence_chart(rep))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _run_name(path: Path) -> str:
    resolved = path.parent / "resolved-config.json"
    if resolved.exists():
        name = json.loads(resolved.read_text()).get("name")
        if name:
            return name
    return path.parent.name if path.name == "metrics.csv" else path.stem


def cmd_plot(args) -> int:
    from .trainer import METRIC_COLUMNS

    series = []
    for p in map(Path, args.metrics):
        if not p.exists():
            raise FileNotFoundError(f"metrics file not found: {p}")
        with open(p, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != METRIC_COLUMNS:
            raise ConfigError(f"{p}: header does not match the metric log schema")
        xs, ys = [], []
        col = METRIC_COLUMNS.index(args.metric)
        for r in rows[1:]:
            if r[col]:
                xs.append(float(r[0]))
                ys.append(float(r[col]))
        series.append((_run_name(p), xs, ys))
    names = args.names.split(",") if args.names else None
    if names:
        if len(names) != len(series):
            raise ConfigError("--names must list one name per metrics file")
        series = [(n, x, y) for n, (_, x, y) in zip(names, series)]
    svg = line_chart(series, title=args.title or "", ylabel=args.metric.replace("_", " "))
    ckpt.atomic_write_text(args.out, svg)
    print(args.out)
    return EXIT_OK


def cmd_teacher(args) -> int:
    from .trainer import build_data, build_teacher, save_teacher

    if not args.out:
        raise ConfigError("--out is required for the teacher checkpoint path")
    cfg = load_config(args).replace(**{"teacher.mode": "learned", "teacher.path": None})
    teacher = build_teacher(cfg, build_data(cfg))
    save_teacher(teacher, args.out)
    print(json.dumps({"out": str(args.out), **teacher.report}, sort_keys=True))
    return EXIT_OK


def cmd_presets(args) -> int:
    for n in presets.names():
        print(n)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _config_args(p, positional=True):
    if positional:
        p.add_argument("config", nargs="?", help="TOML (or JSON) run config")
    p.add_argument("--preset", help="shipped preset name (see `sida presets`)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
    p.add_argument("--out", help="output directory (default $SIDA_OUTPUT_ROOT/<name>)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sida", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    _config_args(p)
    p.add_argument("--mode", choices=["sid", "sida", "sid2a"])
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--sid-checkpoint", dest="sid_checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a generator checkpoint")
    p.add_argument("checkpoint")
    _config_args(p)
    p.add_argument("--samples", type=int)
    p.add_argument("--eval-seed", type=int, dest="eval_seed")
    p.add_argument("--log", help="eval log path (default: eval-log.jsonl beside the checkpoint)")
    p.set_defaults(func=cmd_eval)

    for name, fn, helptext in (("ablate", cmd_ablate, "alpha sweep"), ("compare", cmd_compare, "sid/sida/sid2a comparison")):
        p = sub.add_parser(name, help=helptext)
        _config_args(p)
        p.add_argument("--workers", type=int)
        p.set_defaults(func=fn)

    p = sub.add_parser("plot", help="overlay metric logs as an SVG chart")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="energy_distance")
    p.add_argument("--names", help="comma-separated legend names")
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("teacher", help="pretrain a learned teacher and save it")
    _config_args(p)
    p.set_defaults(func=cmd_teacher)

    p = sub.add_parser("presets", help="list shipped presets")
    p.set_defaults(func=cmd_presets)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    set_deterministic()
    try:
        return args.func(args)
    except NumericFailure as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FileNotFoundError, ckpt.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
