"""Command-line entry point: ``qam <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import sys
import typing
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import harness
from .data import export_csv, gen_dataset, read_dataset, write_dataset
from .envs import PointMaze2D, make_env
from .nn import ConfigurationError, DomainError
from .oracles import dp_policy_value, tilted_gaussian_oracle

EXIT_CONFIG = 2
EXIT_COLLAPSE = 3


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _optional(kind):
    def parse(text):
        return None if text.lower() in ("none", "null") else kind(text)

    return parse


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in _floats(text))


_FIELD_TYPES = {
    "float": float, "int": int, "str": str, "bool": _bool, "tuple": _ints, "dict": json.loads,
    "float | None": _optional(float), "str | None": _optional(str),
}

# flags whose name differs from the config field
_ALIASES = {"train-offline": {"steps": "offline_steps"}, "train-online": {"steps": "online_steps"}}


def _add_config_flags(p: argparse.ArgumentParser, command: str):
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    hints = typing.get_type_hints(harness.RunConfig)
    for f in fields(harness.RunConfig):
        name = getattr(hints[f.name], "__name__", None) or str(hints[f.name])
        parse = _FIELD_TYPES.get(name) or _FIELD_TYPES.get(str(f.type), str)
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=parse, default=None)
    for flag, target in _ALIASES.get(command, {}).items():
        p.add_argument("--" + flag, dest=target, type=int, default=None)


def _run_config(args) -> harness.RunConfig:
    base = {}
    if args.config:
        base = harness.RunConfig.from_json(args.config).to_dict()
    for f in fields(harness.RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    return harness.RunConfig.from_dict(base)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qam", description="Q-learning with adjoint matching on toy tasks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset")
    p.add_argument("--env", default="point-maze")
    p.add_argument("--behavior", default="default")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--routes", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--out", default=None, help="output file (default <env>-<seed>.dat)")

    p = sub.add_parser("train-offline", help="offline training from a dataset")
    _add_config_flags(p, "train-offline")

    p = sub.add_parser("train-online", help="online fine-tuning from a checkpoint")
    _add_config_flags(p, "train-online")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint with deterministic acting")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("oracle", help="print closed-form oracle values")
    osub = p.add_subparsers(dest="oracle", required=True)
    t = osub.add_parser("tilt", help="moments of a Gaussian tilted by a quadratic Q")
    t.add_argument("--mu", type=_floats, required=True)
    t.add_argument("--sigma", type=_floats, required=True, help="behavior variances")
    t.add_argument("--tau", type=float, required=True)
    t.add_argument("--b", type=_floats, required=True)
    t.add_argument("--C", type=_floats, default=None, help="diagonal curvature (default 0)")
    d = osub.add_parser("dp", help="DP value of the scripted grid policy on the point maze")
    d.add_argument("--n", type=int, default=50)
    d.add_argument("--gamma", type=float, default=None)
    d.add_argument("--x", type=float, default=0.11)
    d.add_argument("--y", type=float, default=0.51)

    p = sub.add_parser("export-csv", help="convert a dataset file to CSV")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    return parser


def _fmt(values) -> str:
    return ",".join(f"{v:g}" for v in np.atleast_1d(values))


def _cmd_gen_data(args):
    env = make_env(args.env)
    kw = {"routes": args.routes, "noise": args.noise} if isinstance(env, PointMaze2D) else {}
    ds = gen_dataset(env, behavior=args.behavior, n=args.n, seed=args.seed, **kw)
    out = args.out or f"{args.env}-{args.seed}.dat"
    write_dataset(out, ds)
    print(f"wrote {len(ds)} transitions to {out}")


def _cmd_train_offline(args):
    cfg = _run_config(args)
    out = harness.run_offline(cfg)
    print(f"metrics: {out / harness.METRICS_NAME}\ncheckpoint: {out / harness.CHECKPOINT_NAME}")


def _cmd_train_online(args):
    if not Path(args.checkpoint).is_file():
        raise ConfigurationError(f"checkpoint {args.checkpoint} does not exist")
    cfg = _run_config(args)
    out = harness.run_online(cfg, args.checkpoint)
    print(f"metrics: {out / harness.METRICS_NAME}\ncheckpoint: {out / harness.CHECKPOINT_NAME}")


def _cmd_eval(args):
    if not Path(args.checkpoint).is_file():
        raise ConfigurationError(f"checkpoint {args.checkpoint} does not exist")
    agent, _, env = harness.load_agent(args.checkpoint)
    res = harness.evaluate(agent, env, args.episodes, args.seed)
    for k, v in res.items():
        print(f"{k} {v:g}")


def _cmd_oracle(args):
    if args.oracle == "tilt":
        mean, var = tilted_gaussian_oracle(args.mu, args.sigma, args.tau, args.b, args.C)
        print(f"mean {_fmt(mean)}")
        print(f"var {_fmt(var)}")
        return
    maze = PointMaze2D()
    V = dp_policy_value(maze, maze.grid_policy, n=args.n, gamma=args.gamma)
    i = min(int(args.x * args.n), args.n - 1)
    j = min(int(args.y * args.n), args.n - 1)
    print(f"value {V[i, j]:g}")


def _cmd_export_csv(args):
    export_csv(read_dataset(args.dataset), args.out)
    print(f"wrote {args.out}")


_COMMANDS = {
    "gen-data": _cmd_gen_data, "train-offline": _cmd_train_offline, "train-online": _cmd_train_online,
    "eval": _cmd_eval, "oracle": _cmd_oracle, "export-csv": _cmd_export_csv,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _COMMANDS[args.command](args)
    except (ConfigurationError, DomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.TrainingCollapse as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_COLLAPSE
    return 0


if __name__ == "__main__":
    sys.exit(main())
