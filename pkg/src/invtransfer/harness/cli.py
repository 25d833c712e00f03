"""Command-line entry point: ``invtransfer <subcommand> [--config F] [--seed S] [--out P]``.

Settings resolve as flags over config file over defaults.  ``--set a.b=v``
overrides any config key (``v`` is parsed as JSON when possible).  Errors
exit nonzero with a message naming the failing stage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..downstream import evaluate, finetune
from ..synthetic import gen_downstream, gen_upstream
from ..upstream import UpstreamModel, support_recovery, train_upstream
from .config import config_schema, load_config, to_finetune, to_scenario, to_upstream
from .experiment import StageError, run_experiment, stream, sweep_m, write_sweep, S_DOWN_DATA, S_UP_DATA
from .io import load_model, read_dataset, save_model, write_dataset


def _parse_set(items):
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _config(args):
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.out is not None and args.command in ("baselines", "run", "sweep"):
        overrides["output_dir"] = args.out
    return load_config(args.config, overrides)


def _seed(cfg):
    return cfg.seeds[0]


def cmd_gen(args, cfg):
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seed(cfg)
    write_dataset(out / "upstream.csv", gen_upstream(to_scenario(cfg), cfg.n, stream(seed, S_UP_DATA)))
    for ri, regime in enumerate(cfg.regimes):
        data = gen_downstream(to_scenario(cfg, regime), cfg.m, stream(seed, S_DOWN_DATA, ri))
        write_dataset(out / f"downstream_{regime}.csv", data)
    print(f"wrote datasets to {out}")


def cmd_train_up(args, cfg):
    seed = _seed(cfg)
    data = read_dataset(args.data) if args.data else gen_upstream(to_scenario(cfg), cfg.n, stream(seed, S_UP_DATA))
    model, history = train_upstream(data, to_upstream(cfg, seed), np.random.default_rng(seed), r=cfg.scenario.r, p=cfg.scenario.p)
    out = Path(args.out or "upstream_model.json")
    save_model(out, model)
    rep = support_recovery(model.F, to_scenario(cfg).support, cfg.support_threshold, align=True)
    print(json.dumps({"model": str(out), "final_risk": history[-1]["risk"].total if history else None, "support": rep.as_dict()}))


def cmd_finetune(args, cfg):
    if not args.model or not args.data:
        raise ValueError("finetune needs --model (upstream model file) and --data (downstream csv)")
    up = load_model(args.model)
    h = up.h if isinstance(up, UpstreamModel) else up
    fcfg = to_finetune(cfg, _seed(cfg), args.regime)
    model, history = finetune(h, read_dataset(args.data), fcfg, np.random.default_rng(_seed(cfg)))
    out = Path(args.out or "downstream_model.json")
    save_model(out, model)
    print(json.dumps({"model": str(out), "final_risk": history[-1]["risk"].total if history else None}))


def cmd_eval(args, cfg):
    if not args.model or not args.data:
        raise ValueError("eval needs --model (downstream model file) and --data (csv)")
    loss_kind = to_finetune(cfg, _seed(cfg)).loss_kind
    print(json.dumps(evaluate(load_model(args.model), read_dataset(args.data), loss_kind)))


def cmd_run(args, cfg):
    records = run_experiment(cfg)
    print(f"{len(records)} record(s) written to {cfg.output_dir}")


def cmd_baselines(args, cfg):
    if not any(cfg.baselines.model_dump().values()):
        print("note: every baseline toggle is off; only the full method runs", file=sys.stderr)
    cmd_run(args, cfg)


def cmd_sweep(args, cfg):
    table, slopes = sweep_m(cfg, cfg.m_sweep, cfg.seeds)
    write_sweep(cfg.output_dir, table, slopes)
    print(json.dumps(slopes, indent=1))


def cmd_schema(args, cfg):
    print(json.dumps(config_schema(), indent=1))


COMMANDS = {
    "gen": cmd_gen,
    "train-up": cmd_train_up,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "baselines": cmd_baselines,
    "sweep": cmd_sweep,
    "run": cmd_run,
    "schema": cmd_schema,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="invtransfer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="single seed, replaces the config seed list")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train-up", "finetune", "eval"):
            p.add_argument("--data", help="dataset csv")
        if name in ("finetune", "eval"):
            p.add_argument("--model", help="model json")
        if name == "finetune":
            p.add_argument("--regime", choices=["complete", "partial", "none"], default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    stage = "config"
    try:
        cfg = _config(args)
        stage = args.command
        COMMANDS[args.command](args, cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # every failure leaves with a stage tag and nonzero status
        print(f"error: [{stage}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
