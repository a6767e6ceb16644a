"""Command-line entry point: train, bench, plan, eval, gen-map, export, ablate.

Every option can also come from a YAML manifest passed with --config; flags
given on the command line win over the manifest.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Sequence

from skyway import settings
from skyway.bench import UnknownProfileError, load_agent, plan_once, run_benchmark
from skyway.bspline import export_control_points
from skyway.common import log_event
from skyway.corridor import export_corridor
from skyway.pathsearch import export_polyline
from skyway.planner_env import EnvConfig, plan_reference
from skyway.render import render_scene
from skyway.sdcq import SDCQAgent
from skyway.settings import ConfigError
from skyway.trainer import ABLATION_KNOBS, evaluate, sweep_ablation, train, train_many, write_ablation
from skyway.worldmap import export_map, generate_scenario, import_map, named_scenario

LOGGER = logging.getLogger("skyway.cli")

SCENARIO_CHOICES = ("forest", "sparse_walls", "dense_walls", "curriculum", "uniform", "uniform_forest")


def _point(text: str) -> tuple[float, float, float]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three coordinates x,y,z, got {text!r}")
    return tuple(float(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML manifest with scenario/env/reward/agent/train/bench sections")
    common.add_argument("--vmax", type=float, help="Maximum horizontal speed in m/s")
    common.add_argument("--seed", type=int, help="Base seed for scenarios and episodes")
    common.add_argument("--scenario", choices=SCENARIO_CHOICES, help="Scenario preset")
    common.add_argument("--checkpoint", help="Agent checkpoint file")
    common.add_argument("--out", help="Output file or directory")
    common.add_argument("--debug", action="store_true", help="Show tracebacks on failure")

    parser = argparse.ArgumentParser(prog="skyway", description="Corridor-constrained RL B-spline planner")
    verbs = parser.add_subparsers(dest="verb", required=True)

    p = verbs.add_parser("train", parents=[common], help="Train one agent per v_max")
    p.add_argument("--threads", type=int, help="Sampler worker threads (1 = reproducible)")
    p.add_argument("--steps", type=int, help="Gradient steps")
    p.add_argument("--no-curriculum", action="store_true", help="Train on the uniform map instead")
    p.set_defaults(handler=cmd_train)

    p = verbs.add_parser("bench", parents=[common], help="Run a benchmark suite")
    p.add_argument("--profile", help="Reward profile: corb_f | corb_s | custom (fast and safe are aliases)")
    p.add_argument("--episodes", type=int, help="Episodes in the suite")
    p.add_argument("--workers", type=int, help="Parallel episode workers")
    p.set_defaults(handler=cmd_bench)

    p = verbs.add_parser("plan", parents=[common], help="Plan once on a map file or a scenario preset")
    p.add_argument("--map", help="Map file written by gen-map")
    p.add_argument("--start", type=_point, help="Start position x,y,z")
    p.add_argument("--goal", type=_point, help="Goal position x,y,z")
    p.add_argument("--png", help="Also write a top-down preview")
    p.set_defaults(handler=cmd_plan)

    p = verbs.add_parser("eval", parents=[common], help="Greedy evaluation of a checkpoint")
    p.add_argument("--episodes", type=int, default=5, help="Evaluation episodes")
    p.set_defaults(handler=cmd_eval)

    p = verbs.add_parser("gen-map", parents=[common], help="Generate and save a scenario map")
    p.add_argument("--text", action="store_true", help="Write the human-readable text format")
    p.set_defaults(handler=cmd_gen_map)

    p = verbs.add_parser("export", parents=[common], help="Export polyline, corridor tables and a preview")
    p.add_argument("--map", help="Map file written by gen-map")
    p.add_argument("--start", type=_point, help="Start position x,y,z")
    p.add_argument("--goal", type=_point, help="Goal position x,y,z")
    p.set_defaults(handler=cmd_export)

    p = verbs.add_parser("ablate", parents=[common], help="Sweep one training knob over seeds")
    p.add_argument("--knob", choices=ABLATION_KNOBS, required=True)
    p.add_argument("--values", nargs="+", required=True, help="Values to try for the knob")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.set_defaults(handler=cmd_ablate)
    return parser


def _config(args: argparse.Namespace, overrides: dict[str, Any]) -> dict[str, Any]:
    return settings.load_config(args.config, overrides)


def _scenario_override(args: argparse.Namespace) -> dict[str, Any] | None:
    if args.scenario is None:
        return None
    return {"preset": args.scenario, "rng_seed": args.seed}


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(
        args,
        {
            "scenario": _scenario_override(args),
            "train": {
                "threads": args.threads,
                "total_steps": args.steps,
                "curriculum": False if args.no_curriculum else None,
                "scenario_seed": args.seed,
                "out_dir": args.out,
            },
        },
    )
    train_config = settings.train_config_from_config(config)
    if args.vmax is not None:
        runs = {args.vmax: train(train_config, args.vmax)}
    else:
        runs = train_many(train_config)
    for v_max, run in runs.items():
        settings.dump_config(config, run.log_path.parent / "config.yaml")
        print(f"v_max={v_max:g} run={run.run_id} success={run.final_success:.2f} log={run.log_path}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    config = _config(
        args,
        {
            "bench": {
                "scenario": args.scenario,
                "v_max": args.vmax,
                "profile": args.profile,
                "episodes": args.episodes,
                "seed": args.seed,
                "checkpoint": args.checkpoint,
                "out_dir": args.out,
                "workers": args.workers,
            }
        },
    )
    report = run_benchmark(settings.suite_from_config(config))
    summary = report.summary()
    time_text = "n/a" if summary["mean_episode_time"] is None else f"{summary['mean_episode_time']:.2f}s"
    print(f"{summary['scenario']} v_max={summary['v_max']:g}: {summary['successes']}/{summary['episodes']}, {time_text}")
    print(f"report: {report.path}")
    for alert in report.alerts:
        print(f"alert: {alert['type']}={alert['value']} (threshold {alert['threshold']})")
    return 0


def _agent(args: argparse.Namespace, env_config: EnvConfig) -> SDCQAgent:
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required for this verb")
    return load_agent(args.checkpoint, env_config)


def _map_and_endpoints(args: argparse.Namespace):
    if args.map is not None:
        if args.start is None or args.goal is None:
            raise ConfigError("--start and --goal are required with --map")
        return import_map(args.map), args.start, args.goal
    scenario = generate_scenario(named_scenario(args.scenario or "sparse_walls", args.seed or 0))
    start = args.start if args.start is not None else tuple(scenario.start)
    goal = args.goal if args.goal is not None else tuple(scenario.goal)
    return scenario.grid, start, goal


def cmd_plan(args: argparse.Namespace) -> int:
    config = _config(args, {"env": {"v_max": args.vmax}})
    env_config = settings.env_config_from_config(config)
    grid, start, goal = _map_and_endpoints(args)
    result = plan_once(grid, start, goal, _agent(args, env_config), env_config, args.out)
    timing = ", ".join(f"{key}={value:.1f}" for key, value in result.timings.items())
    print(f"cause={result.cause} {timing}")
    if args.png:
        Path(args.png).write_bytes(
            render_scene(grid, result.corridor, result.trajectory, result.corridor.polyline, endpoints=(start, goal))
        )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config(args, {"env": {"v_max": args.vmax}})
    env_config = settings.env_config_from_config(config)
    preset = named_scenario(args.scenario or "curriculum")
    base = args.seed or 0
    scenarios = [preset.with_changes(rng_seed=base + i) for i in range(args.episodes)]
    result = evaluate(_agent(args, env_config), scenarios, args.episodes, env_config)
    time_text = "n/a" if result.mean_episode_time is None else f"{result.mean_episode_time:.2f}s"
    print(f"success_rate={result.success_rate:.2f} episode_time={time_text} mean_return={result.mean_return:.2f}")
    return 0


def cmd_gen_map(args: argparse.Namespace) -> int:
    scenario = generate_scenario(named_scenario(args.scenario or "forest", args.seed or 0))
    target = Path(args.out or f"{args.scenario or 'forest'}.map")
    export_map(scenario.grid, target, text=args.text)
    print(f"map: {target} start={tuple(scenario.start)} goal={tuple(scenario.goal)}")
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    config = _config(args, {"env": {"v_max": args.vmax}})
    env_config = settings.env_config_from_config(config)
    grid, start, goal = _map_and_endpoints(args)
    plan = plan_reference(grid, start, goal, env_config)
    out_dir = Path(args.out or "export")
    out_dir.mkdir(parents=True, exist_ok=True)
    export_polyline(plan.polyline, out_dir / "polyline.txt")
    export_corridor(plan.corridor, out_dir / "corridor.txt")
    trajectory = None
    if args.checkpoint is not None:
        result = plan_once(grid, start, goal, _agent(args, env_config), env_config)
        trajectory = result.trajectory
        export_control_points(trajectory, out_dir / "control_points.txt")
    (out_dir / "scene.png").write_bytes(
        render_scene(grid, plan.corridor, trajectory, plan.polyline, endpoints=(start, goal))
    )
    log_event("export.written", directory=str(out_dir), sub_corridors=len(plan.corridor))
    print(f"exported to {out_dir}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _config(args, {"scenario": _scenario_override(args), "train": {"out_dir": args.out}})
    train_config = settings.train_config_from_config(config)
    if args.vmax is not None:
        train_config = replace(train_config, v_max_set=(args.vmax,))
    parse: Callable[[str], Any] = {
        "curriculum": lambda v: v.lower() in {"1", "true", "on", "yes"},
        "exploration_per_cycle": int,
        "bins": int,
    }[args.knob]
    results = sweep_ablation(train_config, args.knob, [parse(v) for v in args.values], args.seeds)
    path = write_ablation(results, args.knob, Path(train_config.out_dir) / f"ablation_{args.knob}.txt")
    print(f"ablation table: {path}")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=settings.LOG_LEVEL)
    try:
        return args.handler(args)
    except (ConfigError, UnknownProfileError) as error:
        if args.debug:
            raise
        print(f"error: {error}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, OSError) as error:
        if args.debug:
            raise
        LOGGER.debug("Command failed", exc_info=True)
        print(f"error: {error}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
