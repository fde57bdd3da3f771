"""``distreach`` command line: train, bench, eval, replay-check.

Exit status: 0 success, 1 run failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from pathlib import Path

import yaml

from .cluster import ClusterConfigError, ClusterError, load_cluster_config
from .coordinator import StopCriterion, TrainingAborted, evaluate_policy
from .experiment import (ExperimentPlan, default_config, default_stop, env_label, replay_check,
                         report, run_experiment, threshold_crossing, train_run)
from .kinematics import ChainError, resolve_env
from .ppo import ConfigError, load_config
from .transport import ProtocolError, load_params

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("distreach")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("worker counts must be >= 1")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distreach", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def stop_flags(p):
        p.add_argument("--max-rounds", type=int, default=None, help="default: 300 scara3, 2000 arm6")
        p.add_argument("--threshold", type=float, default=-0.01, help="mean reward stop threshold")
        p.add_argument("--max-seconds", type=float, default=float("inf"))

    p = sub.add_parser("train", help="train one run")
    p.add_argument("--env", default="scara3", help="scara3 | arm6 | env YAML file")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--cluster", default=None, help="cluster config file (sets the worker count)")
    p.add_argument("--config", default=None, help="PPO config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--mode", choices=("in-process", "local-processes", "remote"), default=None)
    stop_flags(p)

    p = sub.add_parser("bench", help="worker-count grid")
    p.add_argument("--env", default="scara3")
    p.add_argument("--workers", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--seeds", type=int, default=3, help="number of seeds (0..N-1)")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="out")
    p.add_argument("--mode", choices=("in-process", "local-processes"), default="in-process")
    stop_flags(p)

    p = sub.add_parser("eval", help="accuracy and repeatability of a parameter file")
    p.add_argument("--params", required=True)
    p.add_argument("--env", default="scara3")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, default=2048)

    p = sub.add_parser("replay-check", help="re-run a finished run and diff its metrics")
    p.add_argument("--run", required=True, help="run directory containing run.json")
    p.add_argument("--scratch", default=None, help="where to put the replay (default: temp dir)")
    return parser


def _stop(args, env: str) -> StopCriterion:
    base = default_stop(env, args.threshold)
    rounds = base.max_rounds if args.max_rounds is None else args.max_rounds
    return StopCriterion(args.threshold, rounds, args.max_seconds)


def cmd_train(args) -> int:
    workers, mode = args.workers, args.mode or "in-process"
    if args.cluster:
        cluster_cfg = load_cluster_config(args.cluster)
        workers = cluster_cfg.total_workers
        mode = args.mode or cluster_cfg.mode
    if workers < 1:
        raise UsageError("--workers must be >= 1")
    cfg = default_config(args.env, workers)
    if args.config:
        cfg = load_config(args.config, cfg)
    cfg = cfg.replace(num_workers=workers)
    env = resolve_env(args.env, cfg.horizon)
    stop = _stop(args, args.env)
    run_dir = Path(args.out) / env_label(args.env) / f"{workers}w_s{args.seed}"

    def show(row):
        print(f"round {row.round:4d}  steps {row.timesteps:8d}  {row.wall_clock_s:8.1f}s  "
              f"reward {row.mean_reward:+.5f}", flush=True)

    try:
        result = train_run(args.env, env, workers, args.seed, cfg, stop, run_dir, mode, show)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    crossing = threshold_crossing(result.metrics, stop.reward_threshold)
    print(f"stopped: {result.reason} after {result.rounds} rounds")
    if crossing:
        print(f"threshold reached at round {crossing[0]} ({crossing[1]:.1f}s, {crossing[2]} steps)")
    print(f"outputs in {run_dir}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config) if args.config else None
    stop = _stop(args, args.env)
    plan = ExperimentPlan(args.env, tuple(args.workers), tuple(range(args.seeds)), cfg, stop,
                          args.out, args.mode)
    summary = run_experiment(plan, progress=lambda line: print(line, flush=True))
    print(report(summary))
    failed = [c for c in summary.cells if c.status != "ok"]
    for c in failed:
        print(f"{c.workers}w seed {c.seed}: {c.status}", file=sys.stderr)
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_eval(args) -> int:
    if args.runs < 2:
        raise UsageError("--runs must be >= 2: repeatability needs at least two runs")
    env = resolve_env(args.env, args.horizon)
    params = load_params(args.params)
    rep = evaluate_policy(params, env, args.runs, args.seed)
    print(f"target (m):          {rep.target.round(4).tolist()}")
    print(f"accuracy (mm):       {rep.accuracy_mm:.3f}")
    print(f"repeatability (mm):  {rep.repeatability_mm:.3f}")
    return EXIT_OK


def cmd_replay(args) -> int:
    run = Path(args.run)
    if not (run / "run.json").exists():
        raise UsageError(f"{run} has no run.json")
    with tempfile.TemporaryDirectory() as tmp:
        verdict = replay_check(run, args.scratch or tmp)
    print("identical" if verdict.identical else f"different: {verdict.detail}")
    return EXIT_OK if verdict.identical else EXIT_FAILURE


COMMANDS = {"train": cmd_train, "bench": cmd_bench, "eval": cmd_eval, "replay-check": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ClusterConfigError, ChainError, yaml.YAMLError) as exc:
        print(f"distreach: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"distreach: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ClusterError, ProtocolError, OSError, RuntimeError) as exc:
        print(f"distreach: run failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
