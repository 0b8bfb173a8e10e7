"""Command-line entry point.

Exit codes: 0 success, 1 one or more sweep cells failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import controllers as ctl
from . import harness
from .config import ConfigError, ExperimentConfig, load_config
from .plant import WeatherError, load_weather

EXIT_OK, EXIT_CELL_FAILURES, EXIT_CONFIG = 0, 1, 2


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "environment", None) is not None:
        cfg.environment.kind = args.environment
    return cfg.validate()


def cmd_train_rl(args) -> int:
    info = harness.train_rl(_config(args))
    print(json.dumps(info, indent=2))
    return EXIT_OK


def cmd_build_terminal(args) -> int:
    info = harness.build_terminal(_config(args))
    print(json.dumps(info, indent=2))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    outcome = harness.sweep(cfg)
    harness.validate_summary(outcome.out_dir)
    for row in outcome.summary:
        print(f"{row['controller']:>10} N={row['horizon']:<3} reward {row['reward_mean']:+.6f} "
              f"[{row['reward_min']:+.6f}, {row['reward_max']:+.6f}]  EPI {row['epi_mean']:+.6f}  "
              f"failed {row['failed']}")
    print(f"summary written to {outcome.out_dir / 'summary.csv'}")
    return EXIT_CELL_FAILURES if outcome.failures else EXIT_OK


def cmd_episode(args) -> int:
    cfg = _config(args)
    if args.kind != "rl" and args.horizon < 1:
        raise ConfigError(f"{args.kind} needs --horizon >= 1")
    if args.kind != "rl":
        cfg.horizons = (args.horizon,)
    cfg.controllers = (args.kind,)
    cfg.validate()
    horizon = 0 if args.kind == "rl" else args.horizon
    cell = harness.Cell(args.kind, horizon, 0, args.draw_seed)
    if args.kind != "mpc":
        harness.load_agent(cfg)
        if args.kind != "rl":
            harness.load_terminal(cfg)
    _, result, err = harness.run_cell(cfg, cell)
    if result is None:
        print(err, file=sys.stderr)
        return EXIT_CELL_FAILURES
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / f"{cell.name}.csv")
    result.write_json(out / f"{cell.name}.json")
    print(json.dumps({k: v for k, v in result.summary().items() if k != "params"}, indent=2))
    return EXIT_OK


def cmd_validate_weather(args) -> int:
    try:
        series = load_weather(args.path)
    except (OSError, WeatherError) as exc:
        print(f"invalid weather file: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    need = args.steps + args.horizon + 2
    ok = len(series) >= need
    v = series.values
    print(f"{len(series)} records ({len(series) / 48:.1f} days); {need} needed for {args.steps} steps "
          f"at horizon {args.horizon}: {'ok' if ok else 'too short'}")
    for i, name in enumerate(("d1 radiation", "d2 CO2", "d3 temperature", "d4 humidity")):
        print(f"  {name:<15} min {v[:, i].min():.6g}  max {v[:, i].max():.6g}")
    return EXIT_OK if ok else EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="greenhouse-rlmpc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="YAML experiment config (default: bundled)")
        p.add_argument("--seed", type=int, help="override the root seed")
        p.add_argument("-o", "--output-dir", help="override the output directory")
        p.add_argument("--environment", choices=["deterministic", "stochastic"], help="override environment kind")

    p = sub.add_parser("train-rl", help="train the SAC agent")
    common(p)
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("build-terminal", help="sample rollouts and fit the terminal cost")
    common(p)
    p.set_defaults(func=cmd_build_terminal)

    p = sub.add_parser("sweep", help="run every controller and horizon, then aggregate")
    common(p)
    p.add_argument("-j", "--workers", type=int, help="worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("episode", help="run a single closed-loop season")
    common(p)
    p.add_argument("--kind", choices=ctl.KINDS, required=True)
    p.add_argument("--horizon", type=int, default=0)
    p.add_argument("--draw-seed", type=int, default=0, help="seed of the parameter draw (stochastic)")
    p.set_defaults(func=cmd_episode)

    p = sub.add_parser("validate-weather", help="check a k,d1,d2,d3,d4 weather CSV")
    p.add_argument("path")
    p.add_argument("--steps", type=int, default=1920)
    p.add_argument("--horizon", type=int, default=16)
    p.set_defaults(func=cmd_validate_weather)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, WeatherError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
