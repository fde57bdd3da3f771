"""Worker-count grid runs, curve/summary CSVs and accuracy reports.

Layout of an experiment directory::

    <out>/<env>/<workers>w_s<seed>/curves_<workers>_<seed>.csv
    <out>/<env>/<workers>w_s<seed>/params.rgp
    <out>/<env>/<workers>w_s<seed>/cell.json
    <out>/<env>/summary.csv

A cell with a ``cell.json`` is finished and is skipped when the grid is re-run.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .cluster import ClusterConfig, shutdown_cluster, spawn_cluster
from .coordinator import (StopCriterion, TrainingAborted, TrainingMetrics, evaluate_policy, train)
from .kinematics import CHAIN_PRESETS, ReacherEnvSpec, resolve_env
from .policy import ParamVector
from .ppo import PpoConfig
from .transport import load_params, save_params

log = logging.getLogger(__name__)

SUMMARY_HEADER = ("workers", "seed", "reached", "rounds_to_threshold", "time_to_threshold_s",
                  "timesteps_to_threshold", "rounds", "final_reward", "accuracy_mm",
                  "repeatability_mm", "status")

DEFAULT_MAX_ROUNDS = {"scara3": 300, "arm6": 2000}

# arm6 is more sensitive to hyperparameters than the SCARA; values tuned at desk scale
ARM6_BASE = {"sgd_stepsize": 1e-4}
ARM6_WORKER_OVERRIDES: dict[int, dict[str, Any]] = {
    1: {},
    2: {},
    4: {},
    8: {},
}


def env_label(env: str) -> str:
    return env if env in CHAIN_PRESETS else Path(env).stem


def default_config(env: str, workers: int = 1) -> PpoConfig:
    """Shipped defaults: the SCARA values everywhere, plus the arm6 table."""
    cfg = PpoConfig(num_workers=workers)
    if env_label(env) == "arm6":
        cfg = cfg.replace(**ARM6_BASE, **ARM6_WORKER_OVERRIDES.get(workers, {}))
    return cfg


def default_stop(env: str, reward_threshold: float = -0.01) -> StopCriterion:
    return StopCriterion(reward_threshold, DEFAULT_MAX_ROUNDS.get(env_label(env), 300))


@dataclass
class ExperimentPlan:
    env: str
    worker_grid: tuple[int, ...] = (1, 2, 4, 8)
    seeds: tuple[int, ...] = (0, 1, 2)
    cfg: PpoConfig | None = None          # None: default_config(env, workers) per cell
    stop: StopCriterion | None = None
    output_dir: str | Path = "out"
    mode: str = "in-process"
    eval_runs: int = 10

    def __post_init__(self):
        self.worker_grid = tuple(int(w) for w in self.worker_grid)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.worker_grid or any(w < 1 for w in self.worker_grid):
            raise ValueError("worker_grid must be non-empty with entries >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.eval_runs < 2:
            raise ValueError("eval_runs must be >= 2")
        if self.stop is None:
            self.stop = default_stop(self.env)

    def config_for(self, workers: int) -> PpoConfig:
        base = self.cfg if self.cfg is not None else default_config(self.env, workers)
        return base.replace(num_workers=workers)

    def cell_dir(self, workers: int, seed: int) -> Path:
        return Path(self.output_dir) / env_label(self.env) / f"{workers}w_s{seed}"


@dataclass
class CellResult:
    workers: int
    seed: int
    reached: bool
    rounds: int = 0
    final_reward: float | None = None
    rounds_to_threshold: int | None = None
    time_to_threshold_s: float | None = None
    timesteps_to_threshold: int | None = None
    accuracy_mm: float | None = None
    repeatability_mm: float | None = None
    status: str = "ok"
    stop_reason: str = ""

    def __post_init__(self):
        if not self.reached:
            self.rounds_to_threshold = self.time_to_threshold_s = self.timesteps_to_threshold = None

    def row(self) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            return repr(float(v)) if isinstance(v, float) else str(v)
        return [str(self.workers), str(self.seed), str(self.reached).lower(),
                fmt(self.rounds_to_threshold), fmt(self.time_to_threshold_s),
                fmt(self.timesteps_to_threshold), str(self.rounds), fmt(self.final_reward),
                fmt(self.accuracy_mm), fmt(self.repeatability_mm), self.status]


@dataclass
class ExperimentSummary:
    env: str
    cells: list[CellResult] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for cell in sorted(self.cells, key=lambda c: (c.workers, c.seed)):
            writer.writerow(cell.row())
        return buf.getvalue()

    def median(self, workers: int, attr: str) -> float | None:
        """Median over seeds, counting unreached cells as +inf (None if all unreached)."""
        vals = [getattr(c, attr) for c in self.cells if c.workers == workers and c.status == "ok"]
        if not vals:
            return None
        med = statistics.median(math.inf if v is None else v for v in vals)
        return None if math.isinf(med) else med


def threshold_crossing(metrics: TrainingMetrics, threshold: float) -> tuple[int, float, int] | None:
    """(round, interpolated seconds, timesteps) of the first row at or above ``threshold``.

    Time is interpolated linearly in reward between the bracketing rows; the
    round index and timesteps are those of the first qualifying row.
    """
    prev = None
    for row in metrics.rows:
        if row.mean_reward >= threshold:
            t = row.wall_clock_s
            if prev is not None and row.mean_reward > prev.mean_reward:
                frac = (threshold - prev.mean_reward) / (row.mean_reward - prev.mean_reward)
                t = prev.wall_clock_s + frac * (row.wall_clock_s - prev.wall_clock_s)
            return row.round, t, row.timesteps
        prev = row
    return None


def write_run_manifest(path: Path, env: str, workers: int, seed: int, cfg: PpoConfig,
                       stop: StopCriterion, mode: str) -> None:
    doc = {"env": env, "workers": workers, "seed": seed, "config": cfg.to_dict(),
           "stop": dataclasses.asdict(stop), "mode": mode}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def read_run_manifest(path: Path) -> tuple[str, int, int, PpoConfig, StopCriterion, str]:
    doc = json.loads(path.read_text(encoding="utf-8"))
    stop = doc["stop"]
    crit = StopCriterion(float(stop["reward_threshold"]), stop["max_rounds"],
                         float(stop["max_wall_clock_seconds"]))
    return (doc["env"], int(doc["workers"]), int(doc["seed"]), PpoConfig.from_dict(doc["config"]),
            crit, doc.get("mode", "in-process"))


def train_run(env_name: str, env: ReacherEnvSpec, workers: int, seed: int, cfg: PpoConfig,
              stop: StopCriterion, run_dir: Path, mode: str = "in-process",
              on_round: Callable | None = None):
    """Spawn, train, persist curve + params, tear down. Returns the TrainResult."""
    run_dir.mkdir(parents=True, exist_ok=True)
    write_run_manifest(run_dir / "run.json", env_name, workers, seed, cfg, stop, mode)
    curve = run_dir / f"curves_{workers}_{seed}.csv"
    cluster = spawn_cluster(ClusterConfig.for_workers(workers, mode), env, cfg, seed)
    try:
        result = train(cluster, cfg, stop, seed, metrics_path=curve, on_round=on_round)
    finally:
        shutdown_cluster(cluster)
    save_params(result.params, run_dir / "params.rgp")
    return result


def run_cell(plan: ExperimentPlan, workers: int, seed: int,
             on_round: Callable | None = None) -> CellResult:
    cfg = plan.config_for(workers)
    env = resolve_env(plan.env, cfg.horizon)
    run_dir = plan.cell_dir(workers, seed)
    try:
        result = train_run(plan.env, env, workers, seed, cfg, plan.stop, run_dir, plan.mode, on_round)
    except TrainingAborted as exc:
        return CellResult(workers, seed, False, rounds=len(exc.metrics), status=f"failed: {exc}")
    except Exception as exc:  # a failed cell must not stop the grid
        log.exception("cell %dw seed %d failed", workers, seed)
        return CellResult(workers, seed, False, status=f"failed: {exc}")
    crossing = threshold_crossing(result.metrics, plan.stop.reward_threshold)
    report = evaluate_policy(result.params, env, plan.eval_runs, seed)
    rows = result.metrics.rows
    cell = CellResult(
        workers, seed, crossing is not None, rounds=result.rounds,
        final_reward=rows[-1].mean_reward if rows else None,
        rounds_to_threshold=crossing[0] if crossing else None,
        time_to_threshold_s=crossing[1] if crossing else None,
        timesteps_to_threshold=crossing[2] if crossing else None,
        accuracy_mm=report.accuracy_mm, repeatability_mm=report.repeatability_mm,
        stop_reason=result.reason,
    )
    (run_dir / "cell.json").write_text(json.dumps(dataclasses.asdict(cell), indent=2) + "\n",
                                       encoding="utf-8")
    return cell


def run_experiment(plan: ExperimentPlan, progress: Callable[[str], None] | None = None) -> ExperimentSummary:
    """Run every (workers, seed) cell in sequence; finished cells are reused."""
    summary = ExperimentSummary(env_label(plan.env))
    for workers in plan.worker_grid:
        for seed in plan.seeds:
            done = plan.cell_dir(workers, seed) / "cell.json"
            if done.exists():
                cell = CellResult(**json.loads(done.read_text(encoding="utf-8")))
            else:
                t0 = time.perf_counter()
                cell = run_cell(plan, workers, seed)
                if progress is not None:
                    progress(f"{workers}w seed {seed}: reached={cell.reached} "
                             f"rounds={cell.rounds_to_threshold} ({time.perf_counter() - t0:.0f}s) "
                             f"{cell.status}")
            summary.cells.append(cell)
    out = Path(plan.output_dir) / env_label(plan.env)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(summary.to_csv(), encoding="utf-8")
    return summary


def report(summary: ExperimentSummary) -> str:
    """Plain-text table, one row per cell."""
    if not summary.cells:
        raise ValueError("empty summary")

    def cell(v, spec):
        return "-" if v is None else format(v, spec)

    lines = [f"{'workers':>7} {'seed':>5} {'accuracy_mm':>12} {'repeatability_mm':>17} "
             f"{'time_to_threshold_s':>20} {'timesteps_to_threshold':>23}"]
    for c in sorted(summary.cells, key=lambda c: (c.workers, c.seed)):
        lines.append(f"{c.workers:>7} {c.seed:>5} {cell(c.accuracy_mm, '.3f'):>12} "
                     f"{cell(c.repeatability_mm, '.3f'):>17} {cell(c.time_to_threshold_s, '.2f'):>20} "
                     f"{cell(c.timesteps_to_threshold, 'd'):>23}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

DETERMINISTIC_COLUMNS = ("round", "timesteps", "mean_reward", "workers", "seed")


def deterministic_view(csv_text: str) -> str:
    """The curve CSV without the wall_clock_s column, which is a measurement."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    keep = [i for i, name in enumerate(rows[0]) if name != "wall_clock_s"] if rows else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for rec in rows:
        writer.writerow([rec[i] for i in keep])
    return buf.getvalue()


@dataclass
class ReplayVerdict:
    identical: bool
    curve_identical: bool
    params_identical: bool
    detail: str


def replay_check(run_dir: str | Path, scratch: str | Path) -> ReplayVerdict:
    """Re-run a finished run from its manifest and diff curve and final parameters."""
    run_dir = Path(run_dir)
    env_name, workers, seed, cfg, stop, mode = read_run_manifest(run_dir / "run.json")
    original_curve = (run_dir / f"curves_{workers}_{seed}.csv").read_text(encoding="utf-8")
    original_params: ParamVector = load_params(run_dir / "params.rgp")
    env = resolve_env(env_name, cfg.horizon)
    scratch = Path(scratch)
    train_run(env_name, env, workers, seed, cfg, stop, scratch, mode)
    replay_curve = (scratch / f"curves_{workers}_{seed}.csv").read_text(encoding="utf-8")
    replay_params = load_params(scratch / "params.rgp")
    curve_ok = deterministic_view(original_curve) == deterministic_view(replay_curve)
    params_ok = original_params.same_values(replay_params)
    detail = []
    if not curve_ok:
        a = deterministic_view(original_curve).splitlines()
        b = deterministic_view(replay_curve).splitlines()
        first = next((i for i, (x, y) in enumerate(zip(a, b)) if x != y), min(len(a), len(b)))
        detail.append(f"curves differ from line {first + 1} ({len(a)} vs {len(b)} lines)")
    if not params_ok:
        detail.append("final parameters differ")
    return ReplayVerdict(curve_ok and params_ok, curve_ok, params_ok, "; ".join(detail) or "identical")
