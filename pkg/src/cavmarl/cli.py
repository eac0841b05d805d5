"""Command-line entry point: train, eval, sweeps, headway trace, obstacle runs."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (
    ExperimentKind,
    ExperimentSpec,
    load_config,
    run_density_sweep,
    run_eval,
    run_headway_trace,
    run_obstacle_corner,
    run_ratio_sweep,
    run_train,
    save_config,
)
from .world import ConfigurationError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="config file (key = value sections)")
    p.add_argument("--seed", type=int, default=None, help="run a single seed")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--density", type=float, default=None, help="vehicles per meter")
    p.add_argument("--cav-ratio", type=float, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--timesteps", type=int, default=None, help="timesteps per episode")
    p.add_argument("--no-shield", action="store_true", help="disable the safe action mapping")
    p.add_argument("--no-sharing", action="store_true", help="disable V2V vision sharing")


def _build_spec(args: argparse.Namespace, kind: ExperimentKind) -> ExperimentSpec:
    spec = load_config(args.config) if args.config else ExperimentSpec()
    spec.kind = kind
    scenario = spec.scenario
    if args.density is not None:
        scenario = replace(scenario, density=args.density)
    if args.cav_ratio is not None:
        scenario = replace(scenario, cav_ratio=args.cav_ratio)
    if args.timesteps is not None:
        scenario = replace(scenario, max_timesteps=args.timesteps)
    spec.scenario = scenario
    if args.episodes is not None:
        spec.train = replace(spec.train, episodes=args.episodes)
    if args.seed is not None:
        spec.seeds = (args.seed,)
    if args.out is not None:
        spec.output_dir = str(args.out)
    if args.no_shield:
        spec.shield = False
    if args.no_sharing:
        spec.sharing = False
    spec.validate()
    return spec


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cavmarl",
        description="Shielded multi-agent lane-change planning on a multi-lane traffic simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("train", "train the safe actor-critic"),
        ("eval", "run greedy shielded episodes (optionally from a checkpoint)"),
        ("sweep-ratio", "system efficiency across CAV ratios"),
        ("sweep-density", "flow and comfort across densities vs baselines"),
        ("headway", "per-timestep minimum headway trace"),
        ("obstacle", "obstacle-at-corner with sharing on vs off"),
        ("write-config", "write the full default config to --out"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, default=None)

    args = parser.parse_args(argv)
    kinds = {
        "train": ExperimentKind.TRAIN,
        "eval": ExperimentKind.EVAL,
        "sweep-ratio": ExperimentKind.RATIO_SWEEP,
        "sweep-density": ExperimentKind.DENSITY_SWEEP,
        "headway": ExperimentKind.HEADWAY_TRACE,
        "obstacle": ExperimentKind.OBSTACLE_CORNER,
        "write-config": ExperimentKind.TRAIN,
    }
    try:
        spec = _build_spec(args, kinds[args.command])
        if args.command == "write-config":
            target = Path(spec.output_dir) / "config.ini"
            save_config(spec, target)
            print(f"wrote {target}")
            return 0
        if args.command == "eval" and getattr(args, "checkpoint", None):
            spec.checkpoint = str(args.checkpoint)
        runner = {
            "train": run_train,
            "eval": run_eval,
            "sweep-ratio": run_ratio_sweep,
            "sweep-density": run_density_sweep,
            "headway": run_headway_trace,
            "obstacle": run_obstacle_corner,
        }[args.command]
        runner(spec)
        print(f"done; outputs in {spec.output_dir}")
        return 0
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
